//! Binary tensor container used for every persisted model artifact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "GTFW"
//! bytes 4..8    u32 format version (currently 1)
//! bytes 8..12   u32 header byte length H
//! bytes 12..    JSON header, exactly H bytes
//! then          one raw f32 array per header entry, in header order
//! ```
//!
//! The header names each tensor, records its shape, and carries two
//! free-form fields: a provenance JSON value and the config hash of the
//! run that produced the file. Values are stored as f32 even though the
//! whole crate computes in f64; writing rounds once (to nearest), and
//! reading widens exactly, so save, load, save again is byte-identical.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GTFW";
pub const VERSION: u32 = 1;

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The JSON header between the length prefix and the payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorMeta>,
    pub dtype: String,
    pub provenance: serde_json::Value,
    pub config_hash: String,
}

/// A fully parsed checkpoint: header plus widened f64 tensors.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub header: Header,
    tensors: Vec<(String, Tensor)>,
}

impl Loaded {
    /// Looks a tensor up by name.
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor { name: name.to_string() })
    }

    /// All tensors in file order.
    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    /// Errors unless the file holds exactly the given tensor names.
    pub fn expect_exact(&self, names: &[&str]) -> Result<()> {
        for name in names {
            self.tensor(name)?;
        }
        let wanted: HashSet<&str> = names.iter().copied().collect();
        for (n, _) in &self.tensors {
            if !wanted.contains(n.as_str()) {
                return Err(Error::UnexpectedTensor { name: n.clone() });
            }
        }
        Ok(())
    }
}

/// Serializes named tensors plus metadata to `path`.
///
/// Tensor order in the file follows the argument order. Values are
/// rounded to f32 here; this is the only lossy step in the crate.
pub fn write_checkpoint(
    path: &Path,
    tensors: &[(&str, &Tensor)],
    provenance: serde_json::Value,
    config_hash: &str,
) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(*name) {
            return Err(Error::BadConfig {
                field: "tensors".into(),
                reason: format!("duplicate tensor name {name:?}"),
            });
        }
    }

    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta { name: (*name).to_string(), shape: t.shape().to_vec() })
            .collect(),
        dtype: "f32".into(),
        provenance,
        config_hash: config_hash.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::json("encoding checkpoint header", e))?;

    let payload_len: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, &out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses a checkpoint file, validating magic, version, and byte counts.
pub fn read_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 12 {
        return Err(Error::Truncated { needed: 12, available: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice length checked");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice length checked"));
    if version != VERSION {
        return Err(Error::BadVersion { expected: VERSION, found: version });
    }
    let header_len =
        u32::from_le_bytes(bytes[8..12].try_into().expect("slice length checked")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Truncated { needed: 12 + header_len, available: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::json("parsing checkpoint header", e))?;
    if header.dtype != "f32" {
        return Err(Error::BadConfig {
            field: "dtype".into(),
            reason: format!("unsupported dtype {:?} (expected \"f32\")", header.dtype),
        });
    }

    let mut offset = 12 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let numel: usize = meta.shape.iter().product();
        let end = offset + numel * 4;
        if bytes.len() < end {
            // Name the tensor whose payload the file ran out inside.
            return Err(Error::PayloadShape {
                name: meta.name.clone(),
                shape: meta.shape.clone(),
                expected: numel,
                found: (bytes.len().saturating_sub(offset)) / 4,
            });
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunks_exact yields 4 bytes")) as f64)
            .collect();
        tensors.push((meta.name.clone(), Tensor::from_vec(&meta.shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::TrailingBytes { extra: bytes.len() - offset });
    }
    Ok(Loaded { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_tensors() -> Vec<(String, Tensor)> {
        vec![
            ("a".to_string(), Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap()),
            ("b".to_string(), Tensor::from_vec(&[2, 2], vec![0.1, 1.0 / 3.0, -0.25, 7.0]).unwrap()),
        ]
    }

    fn write_sample(path: &Path) {
        let ts = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = ts.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(path, &refs, serde_json::json!({"kind": "test"}), "deadbeef01234567")
            .unwrap();
    }

    #[test]
    fn layout_matches_the_documented_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.gtd");
        let t = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
        write_checkpoint(&path, &[("d", &t)], serde_json::json!(null), "00").unwrap();
        let bytes = fs::read(&path).unwrap();

        assert_eq!(&bytes[0..4], b"GTFW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + h + 8);
        // 1.5f32 = 0x3FC00000 and -2.0f32 = 0xC0000000, little-endian.
        assert_eq!(&bytes[12 + h..], &[0x00, 0x00, 0xC0, 0x3F, 0x00, 0x00, 0x00, 0xC0]);
    }

    #[test]
    fn round_trip_quantizes_once_and_preserves_metadata() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.gtd");
        write_sample(&path);
        let loaded = read_checkpoint(&path).unwrap();

        assert_eq!(loaded.header.config_hash, "deadbeef01234567");
        assert_eq!(loaded.header.provenance["kind"], "test");
        let a = loaded.tensor("a").unwrap();
        assert_eq!(a.shape(), &[2]);
        assert_eq!(a.data(), &[1.5, -2.0]);
        let b = loaded.tensor("b").unwrap();
        assert_eq!(b.shape(), &[2, 2]);
        // Widening f32 back to f64 is exact, so 0.1 comes back as the
        // f32 nearest to 0.1, not the f64 one.
        assert_eq!(b.data()[0], 0.1f32 as f64);
        assert_eq!(b.data()[1], (1.0f64 / 3.0) as f32 as f64);
        assert_eq!(b.data()[3], 7.0);

        assert!(matches!(
            loaded.tensor("zzz").unwrap_err(),
            Error::MissingTensor { name } if name == "zzz"
        ));
        loaded.expect_exact(&["a", "b"]).unwrap();
        assert!(matches!(
            loaded.expect_exact(&["a"]).unwrap_err(),
            Error::UnexpectedTensor { name } if name == "b"
        ));
        assert!(matches!(
            loaded.expect_exact(&["a", "b", "c"]).unwrap_err(),
            Error::MissingTensor { name } if name == "c"
        ));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let first = dir.path().join("one.gtd");
        let second = dir.path().join("two.gtd");
        write_sample(&first);
        let loaded = read_checkpoint(&first).unwrap();
        let refs: Vec<(&str, &Tensor)> =
            loaded.tensors().iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(
            &second,
            &refs,
            loaded.header.provenance.clone(),
            &loaded.header.config_hash,
        )
        .unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn corruption_is_reported_with_typed_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.gtd");
        write_sample(&path);
        let good = fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(read_checkpoint(&path).unwrap_err(), Error::BadMagic { .. }));

        let bad_version = {
            let mut b = good.clone();
            b[4..8].copy_from_slice(&2u32.to_le_bytes());
            b
        };
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            read_checkpoint(&path).unwrap_err(),
            Error::BadVersion { expected: 1, found: 2 }
        ));

        // Chop one byte off the end: the reader runs out inside the
        // payload of the last tensor and names it.
        fs::write(&path, &good[..good.len() - 1]).unwrap();
        match read_checkpoint(&path).unwrap_err() {
            Error::PayloadShape { name, expected, found, .. } => {
                assert_eq!(name, "b");
                assert_eq!(expected, 4);
                assert_eq!(found, 3);
            }
            other => panic!("expected PayloadShape, got {other:?}"),
        }

        // Chop inside the header: a plain truncation error.
        fs::write(&path, &good[..8]).unwrap();
        assert!(matches!(read_checkpoint(&path).unwrap_err(), Error::Truncated { .. }));

        let trailing = {
            let mut b = good.clone();
            b.push(0);
            b
        };
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(
            read_checkpoint(&path).unwrap_err(),
            Error::TrailingBytes { extra: 1 }
        ));

        let dup = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(matches!(
            write_checkpoint(&path, &[("x", &dup), ("x", &dup)], serde_json::json!(null), "00")
                .unwrap_err(),
            Error::BadConfig { .. }
        ));
    }
}
