//! AdamW: Adam moment estimates with decoupled weight decay.

use crate::error::{Error, Result};
use super::tensor::Tensor;

/// Optimizer state for a fixed list of parameters.
///
/// Moments are allocated lazily on the first step and keyed by position,
/// so every step must pass the same parameters in the same order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Standard betas (0.9, 0.999) and eps 1e-8.
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::with_betas(lr, weight_decay, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::BadLearningRate { lr });
        }
        Ok(AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Steps completed so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update:
    ///   m = b1 m + (1-b1) g          v = b2 v + (1-b2) g^2
    ///   p -= lr (m_hat / (sqrt(v_hat) + eps) + wd p)
    /// with bias-corrected m_hat = m/(1-b1^t), v_hat = v/(1-b2^t).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::OptimizerStateMismatch { state: grads.len(), params: params.len() });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::OptimizerStateMismatch { state: self.m.len(), params: params.len() });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_must_be_positive() {
        assert!(matches!(
            AdamW::new(0.0, 0.0).unwrap_err(),
            Error::BadLearningRate { lr } if lr == 0.0
        ));
        assert!(AdamW::new(-0.1, 0.0).is_err());
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let before = p.clone();
        let mut opt = AdamW::new(0.1, 0.0).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_exactly() {
        // With g = 0 the moment path contributes nothing, so
        // p' = p - lr*wd*p exactly.
        let (lr, wd) = (0.05, 0.2);
        let mut p = Tensor::from_vec(&[2], vec![2.0, -4.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(lr, wd).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[2.0 - lr * wd * 2.0, -4.0 - lr * wd * (-4.0)]);
    }

    /// Longhand recurrence written out for two steps; the optimizer must
    /// reproduce it exactly, and the step-1 value is pinned as a literal.
    #[test]
    fn two_steps_match_longhand_recurrence() {
        let (lr, wd, b1, b2, eps) = (0.1, 0.0, 0.9, 0.999, 1e-8);
        let g1 = 0.5;
        let g2 = -0.25;

        let mut p_ref = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_ref -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p_ref);
            if t == 1 {
                // p1 = 1 - 0.1 * 0.5/(0.5 + 1e-8)
                assert!((p_ref - 0.9000000020).abs() < 1e-9);
            }
        }

        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(lr, wd).unwrap();
        opt.step(&mut [&mut p], &[&Tensor::scalar(g1)]).unwrap();
        opt.step(&mut [&mut p], &[&Tensor::scalar(g2)]).unwrap();
        assert_eq!(p.item(), p_ref);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(0.1, 0.0).unwrap();
        assert!(matches!(
            opt.step(&mut [&mut p], &[&g]).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn param_count_must_stay_fixed() {
        let mut p1 = Tensor::zeros(&[2]);
        let mut p2 = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(0.1, 0.0).unwrap();
        opt.step(&mut [&mut p1], &[&g]).unwrap();
        assert!(matches!(
            opt.step(&mut [&mut p1, &mut p2], &[&g, &g]).unwrap_err(),
            Error::OptimizerStateMismatch { .. }
        ));
    }
}
