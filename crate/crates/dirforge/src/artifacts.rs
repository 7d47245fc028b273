//! On-disk artifact formats: frames, pair datasets, and the tree
//! manifest that makes a run self-verifying.
//!
//! Frames are written twice: a 16-bit binary PGM (P5, maxval 65535,
//! sample bytes most significant first, pixels clamped to [0, 1]) for
//! looking at, and a raw little-endian float64 sidecar with the same
//! stem for lossless round trips. Pair datasets are a directory of
//! `meta.json` plus `pairs.f32`, raw little-endian float32 in
//! [N, 2, pixels] layout with input and edited frames interleaved.
//! Every format embeds the run's config hash. `write_manifest` records
//! a SHA-256 per file so `verify_manifest` can prove a tree is intact
//! and internally consistent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::world::{Attribute, GroundTruthDirection, PairSet, StyleVector, WorldConfig};

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// ---- frames ------------------------------------------------------------

/// Writes a flat frame as a 16-bit PGM. `width` must divide the pixel
/// count; values are clamped to [0, 1] and scaled to 0..=65535.
pub fn write_pgm(path: &Path, image: &Tensor, width: usize, config_hash: &str) -> Result<()> {
    let n = image.numel();
    if width == 0 || n % width != 0 {
        return Err(Error::BadConfig {
            field: "width".into(),
            reason: format!("{width} does not divide {n} pixels"),
        });
    }
    let height = n / width;
    let mut bytes = format!("P5\n# config {config_hash}\n{width} {height}\n65535\n").into_bytes();
    for v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_file(path, &bytes)
}

/// Reads a 16-bit PGM written by [`write_pgm`] back to a flat frame in
/// [0, 1]. Returns the frame and its width.
pub fn read_pgm(path: &Path) -> Result<(Tensor, usize)> {
    let bytes = read_file(path)?;
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(Error::BadConfig {
            field: "pgm".into(),
            reason: format!("{} is not a binary PGM", path.display()),
        });
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::BadConfig {
            field: what.into(),
            reason: format!("bad {what} {s:?}"),
        })
    };
    let (width, height) = (parse(&tokens[1], "width")?, parse(&tokens[2], "height")?);
    if tokens[3] != "65535" {
        return Err(Error::BadConfig {
            field: "maxval".into(),
            reason: format!("expected 65535, got {}", tokens[3]),
        });
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 2;
    let avail = bytes.len().saturating_sub(pos);
    if avail < need {
        return Err(Error::Truncated { needed: need, available: avail });
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok((Tensor::from_vec(&[width * height], data)?, width))
}

/// Writes a frame as raw little-endian float64, lossless.
pub fn write_f64_raw(path: &Path, image: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.numel() * 8);
    for v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Reads a raw float64 frame back as a flat tensor.
pub fn read_f64_raw(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Truncated {
            needed: bytes.len().div_ceil(8) * 8,
            available: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
        .collect();
    Tensor::from_vec(&[data.len()], data)
}

/// Writes `<stem>.pgm` plus the lossless `<stem>.f64` sidecar.
pub fn write_frame(
    dir: &Path,
    stem: &str,
    image: &Tensor,
    width: usize,
    config_hash: &str,
) -> Result<[PathBuf; 2]> {
    let pgm = dir.join(format!("{stem}.pgm"));
    let raw = dir.join(format!("{stem}.f64"));
    write_pgm(&pgm, image, width, config_hash)?;
    write_f64_raw(&raw, image)?;
    Ok([pgm, raw])
}

/// Reads a frame from either format, preferring the lossless sidecar
/// when handed a `.f64` path.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f64") => read_f64_raw(path),
        _ => read_pgm(path).map(|(t, _)| t),
    }
}

// ---- pair datasets -----------------------------------------------------

/// Everything `meta.json` records about a pair dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMeta {
    pub direction: GroundTruthDirection,
    pub seed: u64,
    pub n: usize,
    pub pixels: usize,
    pub img_size: usize,
    /// Attribute ranges, name to (lo, hi).
    pub ranges: BTreeMap<String, (f64, f64)>,
    /// The full direction registry at write time.
    pub registry: Vec<GroundTruthDirection>,
    pub styles: Vec<StyleVector>,
    pub clamped_edits: usize,
    pub config_hash: String,
    pub crate_version: String,
}

/// Writes a pair dataset directory: `meta.json` plus `pairs.f32`
/// (raw little-endian float32, [N, 2, pixels], input then edited per
/// pair). Returns the two paths.
pub fn write_pairs(
    dir: &Path,
    pairs: &PairSet,
    world: &WorldConfig,
    config_hash: &str,
) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let meta = PairMeta {
        direction: pairs.direction.clone(),
        seed: pairs.seed,
        n: pairs.inputs.len(),
        pixels: world.pixels(),
        img_size: world.img_size,
        ranges: Attribute::ALL
            .iter()
            .map(|a| (a.name().to_string(), a.range()))
            .collect(),
        registry: crate::world::registry(),
        styles: pairs.styles.clone(),
        clamped_edits: pairs.clamped_edits,
        config_hash: config_hash.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::json("serializing pair metadata", e))?;
    write_file(&meta_path, json.as_bytes())?;

    let mut bytes = Vec::with_capacity(pairs.inputs.len() * 2 * world.pixels() * 4);
    for (input, edited) in pairs.inputs.iter().zip(&pairs.edited) {
        for frame in [input, edited] {
            if frame.numel() != world.pixels() {
                return Err(Error::ShapeMismatch {
                    left: frame.shape().to_vec(),
                    right: vec![world.pixels()],
                });
            }
            for v in frame.data() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    let data_path = dir.join("pairs.f32");
    write_file(&data_path, &bytes)?;
    Ok([meta_path, data_path])
}

/// Reads a pair dataset directory back. Frames come back float32
/// quantized; learning from a written dataset gives the same result
/// whether it was staged through the CLI or the one-shot pipeline.
pub fn read_pairs(dir: &Path) -> Result<(PairSet, PairMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: PairMeta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| Error::json(format!("parsing {}", meta_path.display()), e))?;
    let bytes = read_file(&dir.join("pairs.f32"))?;
    let need = meta.n * 2 * meta.pixels * 4;
    if bytes.len() != need {
        return Err(Error::Truncated { needed: need, available: bytes.len() });
    }
    let mut inputs = Vec::with_capacity(meta.n);
    let mut edited = Vec::with_capacity(meta.n);
    for pair in 0..meta.n {
        let mut frames = [Vec::new(), Vec::new()];
        for (slot, frame) in frames.iter_mut().enumerate() {
            let start = (pair * 2 + slot) * meta.pixels * 4;
            *frame = bytes[start..start + meta.pixels * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunks_exact(4)")) as f64)
                .collect();
        }
        let [i, e] = frames;
        inputs.push(Tensor::from_vec(&[meta.pixels], i)?);
        edited.push(Tensor::from_vec(&[meta.pixels], e)?);
    }
    let set = PairSet {
        direction: meta.direction.clone(),
        seed: meta.seed,
        styles: meta.styles.clone(),
        inputs,
        edited,
        clamped_edits: meta.clamped_edits,
    };
    Ok((set, meta))
}

// ---- manifest ----------------------------------------------------------

/// `manifest.json`: the tree's own integrity record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    /// Relative path to SHA-256, sorted by path.
    pub files: BTreeMap<String, String>,
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            walk_files(root, &p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn relative_name(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hashes every file under `root` (except `manifest.json` itself) and
/// writes the manifest. Call last; the manifest never lists itself.
pub fn write_manifest(root: &Path, config_hash: &str, seed: u64) -> Result<PathBuf> {
    let mut paths = Vec::new();
    walk_files(root, root, &mut paths)?;
    let mut files = BTreeMap::new();
    for p in paths {
        let rel = relative_name(root, &p);
        if rel == "manifest.json" {
            continue;
        }
        files.insert(rel, sha256_hex(&read_file(&p)?));
    }
    let manifest = Manifest {
        config_hash: config_hash.into(),
        seed,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        files,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("serializing manifest", e))?;
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

/// Re-hashes a tree against its manifest. Fails on the first changed
/// file, on a listed file that disappeared, and on files the manifest
/// never heard of. Returns the manifest and the number of files
/// checked.
pub fn verify_manifest(root: &Path) -> Result<(Manifest, usize)> {
    let manifest_path = root.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::json(format!("parsing {}", manifest_path.display()), e))?;
    let mut paths = Vec::new();
    walk_files(root, root, &mut paths)?;
    let mut seen = 0usize;
    for p in &paths {
        let rel = relative_name(root, p);
        if rel == "manifest.json" {
            continue;
        }
        match manifest.files.get(&rel) {
            None => {
                return Err(Error::BadConfig {
                    field: "manifest".into(),
                    reason: format!("tree holds a file the manifest never listed: {rel}"),
                })
            }
            Some(expected) => {
                let found = sha256_hex(&read_file(p)?);
                if &found != expected {
                    return Err(Error::HashMismatch {
                        path: rel,
                        expected: expected.clone(),
                        found,
                    });
                }
                seen += 1;
            }
        }
    }
    if seen != manifest.files.len() {
        let have: Vec<String> =
            paths.iter().map(|p| relative_name(root, p)).collect();
        let missing = manifest
            .files
            .keys()
            .find(|k| !have.contains(k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::BadConfig {
            field: "manifest".into(),
            reason: format!("manifest lists a file the tree lost: {missing}"),
        });
    }
    Ok((manifest, seen))
}

/// Checks that an artifact's embedded config hash matches the tree's.
pub fn check_embedded_hash(path: &str, tree_hash: &str, embedded: &str) -> Result<()> {
    if embedded != tree_hash {
        return Err(Error::ForeignArtifact {
            path: path.into(),
            expected: tree_hash.into(),
            found: embedded.into(),
        });
    }
    Ok(())
}

/// The hash a frame PGM embeds in its `# config` comment, if any.
pub fn pgm_embedded_hash(path: &Path) -> Result<Option<String>> {
    let bytes = read_file(path)?;
    for line in bytes.split(|b| *b == b'\n').take(4) {
        if let Some(rest) = line.strip_prefix(b"# config ") {
            return Ok(Some(String::from_utf8_lossy(rest).trim().to_string()));
        }
    }
    Ok(None)
}
