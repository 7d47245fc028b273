//! The dense tensor value type.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Dense n-dimensional f64 array with optional gradient tracking.
///
/// Data is shared behind an [`Arc`] so tensors clone cheaply and cross
/// threads freely; mutation copies on write. The gradient buffer, when
/// present, always matches the tensor's shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// Whether tape operations should track gradients for this tensor.
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
                expected,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("full: consistent by construction")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar: consistent by construction")
    }

    /// Seeded normal init with the given standard deviation.
    pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Self {
        let n = shape.iter().product();
        let data = rng::normal_vec(rng, n).into_iter().map(|x| x * std).collect();
        Tensor::from_vec(shape, data).expect("randn: consistent by construction")
    }

    /// Marks the tensor as a gradient target (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the underlying buffer (no copy).
    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        let owned: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        owned.as_mut_slice()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; shape must match.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::LengthMismatch {
                shape: self.shape.clone(),
                len: grad.len(),
                expected: self.numel(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Max |a - b| over elements; shapes must match exactly.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Euclidean norm of the data buffer.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl PartialEq for Tensor {
    /// Bitwise value equality (shape and data; gradient state ignored).
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            Error::LengthMismatch { shape, len, expected } => {
                assert_eq!(shape, vec![2, 3]);
                assert_eq!(len, 5);
                assert_eq!(expected, 6);
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn grad_shape_enforced() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn randn_is_seeded() {
        let a = Tensor::randn(&mut crate::rng::stream(3, "init", 0), &[8], 0.5);
        let b = Tensor::randn(&mut crate::rng::stream(3, "init", 0), &[8], 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn bitwise_equality_detects_change() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a, b);
        let one_ulp_up = f64::from_bits(b.data()[1].to_bits() + 1);
        b.data_mut()[1] = one_ulp_up;
        assert_ne!(a, b);
    }
}
