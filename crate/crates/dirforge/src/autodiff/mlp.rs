//! Dense feedforward stacks built on the tape.
//!
//! Both networks in this crate (the style encoder and the noise
//! predictor) are plain MLPs, so the layer bookkeeping lives here
//! once: parameter storage, seeded init, and a bind-then-forward
//! split that keeps gradient accumulation correct when one set of
//! weights is applied to many inputs on a single tape.

use super::tape::{linear, Activation, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use rand_chacha::ChaCha8Rng;

/// A stack of dense layers with a fixed hidden activation. The last
/// layer is always linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// Layer weights, each of shape [fan_out, fan_in].
    pub weights: Vec<Tensor>,
    /// Layer biases, each of shape [fan_out].
    pub biases: Vec<Tensor>,
    /// Applied between layers (never after the last).
    pub activation: Activation,
}

/// Tape-registered view of an [`Mlp`]: one leaf per parameter tensor.
///
/// Binding once and forwarding many times makes every application of
/// the network share the same leaf nodes, so the backward pass sums
/// gradients across all uses, which is exactly the batch semantics
/// the training loops want.
pub struct BoundMlp<'t> {
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    activation: Activation,
}

impl Mlp {
    /// Fresh network for the given layer sizes, e.g. `[256, 64, 16]`.
    /// Weights are He-scaled normals (std sqrt(2 / fan_in)), biases
    /// zero, and every tensor starts with gradients enabled.
    pub fn init(rng: &mut ChaCha8Rng, sizes: &[usize], activation: Activation) -> Mlp {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            weights.push(Tensor::randn(rng, &[fan_out, fan_in], std).with_grad());
            biases.push(Tensor::zeros(&[fan_out]).with_grad());
        }
        Mlp { weights, biases, activation }
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b)).collect(),
            activation: self.activation,
        }
    }

    /// All parameters, weights before biases layer by layer. The order
    /// is the contract shared by `bind`, the optimizer state and the
    /// checkpoint format.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(self.biases.iter()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Mutable view of the parameters, in [`Mlp::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Names matching [`Mlp::params`] order: `w0, b0, w1, b1, ...`.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.weights.len()).flat_map(|i| [format!("w{i}"), format!("b{i}")]).collect()
    }

    /// Zeroes the final layer so the untrained network outputs exactly
    /// zero everywhere (a common init for residual-style predictors:
    /// the initial loss then equals the predict-nothing floor).
    pub fn zero_last_layer(&mut self) {
        let last = self.weights.len() - 1;
        let w = &mut self.weights[last];
        *w = Tensor::zeros(w.shape()).with_grad();
        let b = &mut self.biases[last];
        *b = Tensor::zeros(b.shape()).with_grad();
    }

    /// Flips gradient tracking on every parameter.
    pub fn set_requires_grad(&mut self, on: bool) {
        for p in self.params_mut() {
            p.requires_grad = on;
        }
    }

    /// Sum of |value| over all parameters: cheap tamper check used to
    /// assert that a frozen network really did not move.
    pub fn l1_checksum(&self) -> f64 {
        self.params().iter().flat_map(|p| p.data().iter()).map(|x| x.abs()).sum()
    }

    /// Layer sizes as given at init.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.weights.iter().map(|w| w.shape()[1]).collect();
        s.push(self.weights.last().expect("at least one layer").shape()[0]);
        s
    }
}

impl<'t> BoundMlp<'t> {
    /// Applies the network to a rank-1 input.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            h = linear(*w, *b, h)?;
            if i != last {
                h = h.activate(self.activation);
            }
        }
        Ok(h)
    }

    /// Gradients of the bound leaves after a backward pass, in
    /// [`Mlp::params`] order. Missing gradients (frozen tensors, or no
    /// backward yet) surface as None.
    pub fn grads(&self, tape: &'t Tape) -> Vec<Option<Tensor>> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| [tape.grad(*w), tape.grad(*b)])
            .collect()
    }
}
