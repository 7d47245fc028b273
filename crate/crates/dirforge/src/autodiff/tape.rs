//! Eager tape: operations compute immediately and record enough to
//! replay backward once.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::tensor::Tensor;

/// Smooth activation kinds available to the MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// ln(1 + e^x), derivative 1/(1 + e^-x).
    Softplus,
    /// tanh(x), derivative 1 - tanh(x)^2.
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::UnknownActivation { name: other.to_string() }),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Neg(usize),
    Sqrt(usize),
    Act(usize, Activation),
    Sum(usize),
    Mean(usize),
    SqL2(usize),
    Broadcast(usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Concat(Vec<usize>),
    Reshape(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Records one computation; single-threaded, consumed by one backward pass.
pub struct Tape {
    id: u64,
    inner: RefCell<TapeInner>,
}

/// Handle to one node on a tape. Copyable; valid as long as the tape lives.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} on tape {})", self.idx, self.tape.id)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner { nodes: Vec::new(), consumed: false }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
            grad: None,
        });
        Var { tape: self, idx: inner.nodes.len() - 1 }
    }

    /// Registers a tensor; tracked exactly when `t.requires_grad` is set.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
            grad: None,
        });
        Var { tape: self, idx: inner.nodes.len() - 1 }
    }

    /// Registers a tensor as an untracked constant regardless of its flag.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var { tape: self, idx: inner.nodes.len() - 1 }
    }

    /// Rank-1 untracked constant from raw values.
    pub fn constant_vec(&self, data: Vec<f64>) -> Var<'_> {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf, false)
    }

    /// Scalar untracked constant.
    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.push(vec![1], vec![x], Op::Leaf, false)
    }

    /// Gradient of a node after [`Tape::backward`]; `None` for untracked
    /// nodes or nodes the loss never reached.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        assert_eq!(v.tape.id, self.id, "grad() with a foreign var");
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.idx];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(&node.shape, g.clone()).expect("grad shape consistent"))
    }

    /// Reverse pass from a scalar loss. Visits each recorded node exactly
    /// once (reverse topological order) and accumulates into every tracked
    /// ancestor, so shared subexpressions sum their contributions. The
    /// tape is consumed: a second call is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if loss.tape.id != self.id {
            return Err(Error::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.consumed = true;
        let loss_shape = inner.nodes[loss.idx].shape.clone();
        if inner.nodes[loss.idx].value.len() != 1 {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        if !inner.nodes[loss.idx].needs_grad {
            return Ok(()); // loss depends on no tracked leaf; all grads stay None
        }
        inner.nodes[loss.idx].grad = Some(vec![1.0]);

        let nodes = &mut inner.nodes;
        for i in (0..=loss.idx).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = nodes[i].grad.take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate_iter(nodes, a, g.iter().copied());
                    accumulate_iter(nodes, b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate_iter(nodes, a, g.iter().copied());
                    accumulate_iter(nodes, b, g.iter().map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = Arc::clone(&nodes[a].value);
                    let bv = Arc::clone(&nodes[b].value);
                    accumulate_iter(nodes, a, g.iter().zip(bv.iter()).map(|(g, b)| g * b));
                    accumulate_iter(nodes, b, g.iter().zip(av.iter()).map(|(g, a)| g * a));
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = Arc::clone(&nodes[a].value);
                    let bv = Arc::clone(&nodes[b].value);
                    accumulate_iter(nodes, a, g.iter().zip(bv.iter()).map(|(g, b)| g / b));
                    accumulate_iter(
                        nodes,
                        b,
                        g.iter()
                            .zip(av.iter())
                            .zip(bv.iter())
                            .map(|((g, a), b)| -g * a / (b * b)),
                    );
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    accumulate_iter(nodes, a, g.iter().copied());
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate_iter(nodes, a, g.iter().map(|x| x * c));
                }
                Op::Neg(a) => {
                    let a = *a;
                    accumulate_iter(nodes, a, g.iter().map(|x| -x));
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let out = Arc::clone(&nodes[i].value);
                    accumulate_iter(nodes, a, g.iter().zip(out.iter()).map(|(g, y)| g * 0.5 / y));
                }
                Op::Act(a, kind) => {
                    let (a, kind) = (*a, *kind);
                    let av = Arc::clone(&nodes[a].value);
                    match kind {
                        Activation::Softplus => accumulate_iter(
                            nodes,
                            a,
                            g.iter().zip(av.iter()).map(|(g, x)| g * sigmoid(*x)),
                        ),
                        Activation::Tanh => {
                            let out = Arc::clone(&nodes[i].value);
                            accumulate_iter(
                                nodes,
                                a,
                                g.iter().zip(out.iter()).map(|(g, y)| g * (1.0 - y * y)),
                            )
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = nodes[a].value.len();
                    let g0 = g[0];
                    accumulate_iter(nodes, a, std::iter::repeat(g0).take(n));
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = nodes[a].value.len();
                    let g0 = g[0] / n as f64;
                    accumulate_iter(nodes, a, std::iter::repeat(g0).take(n));
                }
                Op::SqL2(a) => {
                    let a = *a;
                    let av = Arc::clone(&nodes[a].value);
                    let g0 = g[0];
                    accumulate_iter(nodes, a, av.iter().map(|x| 2.0 * g0 * x));
                }
                Op::Broadcast(a) => {
                    let a = *a;
                    let total: f64 = g.iter().sum();
                    accumulate_iter(nodes, a, std::iter::once(total));
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    let av = Arc::clone(&nodes[a].value);
                    let bv = Arc::clone(&nodes[b].value);
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i_ in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i_ * n + j] * bv[p * n + j];
                            }
                            da[i_ * k + p] = acc;
                        }
                    }
                    accumulate_iter(nodes, a, da.into_iter());
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i_ in 0..m {
                        let arow = &av[i_ * k..(i_ + 1) * k];
                        let grow = &g[i_ * n..(i_ + 1) * n];
                        for (p, ap) in arow.iter().enumerate() {
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, gj) in dst.iter_mut().zip(grow.iter()) {
                                *d += ap * gj;
                            }
                        }
                    }
                    accumulate_iter(nodes, b, db.into_iter());
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p].value.len();
                        let seg: Vec<f64> = g[offset..offset + len].to_vec();
                        accumulate_iter(nodes, p, seg.into_iter());
                        offset += len;
                    }
                }
                Op::Reshape(a) => {
                    let a = *a;
                    accumulate_iter(nodes, a, g.iter().copied());
                }
            }
            nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Adds `contrib` into the gradient buffer of `nodes[idx]`, allocating it
/// on first touch. Skips untracked nodes.
fn accumulate_iter(nodes: &mut [Node], idx: usize, contrib: impl Iterator<Item = f64>) {
    if !nodes[idx].needs_grad {
        return;
    }
    let n = nodes[idx].value.len();
    let grad = nodes[idx].grad.get_or_insert_with(|| vec![0.0; n]);
    for (slot, c) in grad.iter_mut().zip(contrib) {
        *slot += c;
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.clone()
    }

    /// Snapshot of the node value (cheap: shares the buffer).
    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        Tensor::from_vec(&node.shape, node.value.to_vec()).expect("node shape consistent")
    }

    fn value_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].needs_grad
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if self.tape.id == other.tape.id {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    fn same_shape(&self, other: &Var<'t>) -> Result<()> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls == rs {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { left: ls, right: rs })
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        self.same_shape(&other)?;
        let (av, bv) = (self.value_arc(), other.value_arc());
        let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(a, b)| f(*a, *b)).collect();
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self
            .tape
            .push(self.shape(), out, op(self.idx, other.idx), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out: Vec<f64> = self.value_arc().iter().map(|x| x + c).collect();
        self.tape
            .push(self.shape(), out, Op::AddScalar(self.idx), self.needs_grad())
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out: Vec<f64> = self.value_arc().iter().map(|x| x * c).collect();
        self.tape
            .push(self.shape(), out, Op::Scale(self.idx, c), self.needs_grad())
    }

    pub fn neg(self) -> Var<'t> {
        let out: Vec<f64> = self.value_arc().iter().map(|x| -x).collect();
        self.tape
            .push(self.shape(), out, Op::Neg(self.idx), self.needs_grad())
    }

    /// Elementwise square root; caller guarantees non-negative input.
    pub fn sqrt(self) -> Var<'t> {
        let out: Vec<f64> = self.value_arc().iter().map(|x| x.sqrt()).collect();
        self.tape
            .push(self.shape(), out, Op::Sqrt(self.idx), self.needs_grad())
    }

    pub fn activate(self, kind: Activation) -> Var<'t> {
        let out: Vec<f64> = match kind {
            Activation::Softplus => self.value_arc().iter().map(|x| softplus(*x)).collect(),
            Activation::Tanh => self.value_arc().iter().map(|x| x.tanh()).collect(),
        };
        self.tape
            .push(self.shape(), out, Op::Act(self.idx, kind), self.needs_grad())
    }

    pub fn softplus(self) -> Var<'t> {
        self.activate(Activation::Softplus)
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value_arc().iter().sum();
        self.tape
            .push(vec![1], vec![s], Op::Sum(self.idx), self.needs_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value_arc();
        let s: f64 = v.iter().sum();
        let m = s / v.len() as f64;
        self.tape
            .push(vec![1], vec![m], Op::Mean(self.idx), self.needs_grad())
    }

    /// Squared Euclidean norm, reduced to a scalar.
    pub fn sq_l2(self) -> Var<'t> {
        let s: f64 = self.value_arc().iter().map(|x| x * x).sum();
        self.tape
            .push(vec![1], vec![s], Op::SqL2(self.idx), self.needs_grad())
    }

    /// Repeats a scalar into a rank-1 vector of length n. The backward
    /// pass sums the incoming gradient back into the scalar.
    pub fn broadcast(self, n: usize) -> Var<'t> {
        let v = self.value_arc();
        assert_eq!(v.len(), 1, "broadcast source must be a scalar");
        self.tape
            .push(vec![n], vec![v[0]; n], Op::Broadcast(self.idx), self.needs_grad())
    }

    /// Matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::MatmulShape { left: ls, right: rs });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let (av, bv) = (self.value_arc(), other.value_arc());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, ap) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bj) in orow.iter_mut().zip(brow.iter()) {
                    *o += ap * bj;
                }
            }
        }
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::Matmul { a: self.idx, b: other.idx, m, k, n },
            needs,
        ))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let expected: usize = shape.iter().product();
        let v = self.value_arc();
        if v.len() != expected {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                len: v.len(),
                expected,
            });
        }
        Ok(self
            .tape
            .push(shape.to_vec(), v.to_vec(), Op::Reshape(self.idx), self.needs_grad()))
    }

    /// Stop-gradient: same value, recorded as an untracked leaf.
    pub fn detach(self) -> Var<'t> {
        let v = self.value_arc();
        self.tape.push(self.shape(), v.to_vec(), Op::Leaf, false)
    }

    /// Concatenates rank-1 vars in order.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().expect("concat of at least one part");
        let mut out = Vec::new();
        let mut needs = false;
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.len() != 1 {
                return Err(Error::ShapeMismatch { left: vec![s.iter().product()], right: s });
            }
            out.extend_from_slice(&p.value_arc());
            needs |= p.needs_grad();
        }
        let idxs = parts.iter().map(|p| p.idx).collect();
        let n = out.len();
        Ok(first.tape.push(vec![n], out, Op::Concat(idxs), needs))
    }
}

/// Dense layer: `w [m,k] x [k] + b [m]`.
pub fn linear<'t>(w: Var<'t>, b: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let k = x.shape()[0];
    let m = w.shape()[0];
    w.matmul(x.reshape(&[k, 1])?)?.reshape(&[m])?.add(b)
}

/// cos(a, b) = a.b / (|a| |b|), differentiable in both arguments.
///
/// Errors when either norm is below 1e-12: the similarity (and its
/// gradient) is undefined there.
pub fn cosine_similarity<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.same_shape(&b)?;
    let na2 = a.sq_l2();
    let nb2 = b.sq_l2();
    let (la, lb) = (na2.value().item().sqrt(), nb2.value().item().sqrt());
    if la < 1e-12 || lb < 1e-12 {
        return Err(Error::ZeroNorm { left_norm: la, right_norm: lb });
    }
    let dot = a.mul(b)?.sum();
    dot.div(na2.sqrt().mul(nb2.sqrt())?)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    fn vec_tensor(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn add_values() {
        let tape = Tape::new();
        let a = tape.leaf(&vec_tensor(&[1.0, 2.0]));
        let b = tape.leaf(&vec_tensor(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[3, 2]));
        match a.add(b).unwrap_err() {
            Error::ShapeMismatch { left, right } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // d/dx sum(x*x) = 2x
        let tape = Tape::new();
        let x = tape.leaf(&vec_tensor(&[1.0, 2.0, 3.0]).with_grad());
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x at x=3: f' = 2x + 1 = 7
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
        let loss = x.mul(x).unwrap().add(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0).with_grad());
        let y = x.softplus();
        assert!((y.value().item() - 2.0_f64.ln()).abs() < 1e-15);
        tape.backward(y.sum()).unwrap();
        assert!((tape.grad(x).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_value() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_bad_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(matches!(
            a.matmul(b).unwrap_err(),
            Error::MatmulShape { .. }
        ));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        // loss = sum((A B)^2) as a function of A's entries, checked
        // against central differences with h = 1e-5.
        let mut rng = crate::rng::stream(11, "gradcheck", 0);
        let b_fixed = Tensor::randn(&mut rng, &[3, 2], 1.0);
        let a0 = Tensor::randn(&mut rng, &[2, 3], 1.0);

        let f = |a_data: &[f64]| {
            let tape = Tape::new();
            let a = tape.leaf(&Tensor::from_vec(&[2, 3], a_data.to_vec()).unwrap());
            let b = tape.leaf(&b_fixed);
            a.matmul(b).unwrap().sq_l2().value().item()
        };
        let numeric = gradcheck::central_diff(f, a0.data(), 1e-5);

        let tape = Tape::new();
        let a = tape.leaf(&a0.clone().with_grad());
        let b = tape.leaf(&b_fixed);
        let loss = a.matmul(b).unwrap().sq_l2();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap();

        let report = gradcheck::compare(analytic.data(), &numeric);
        assert!(report.max_rel < 1e-6, "max rel err {}", report.max_rel);
    }

    #[test]
    fn unit_normalize_composite_matches_finite_differences() {
        // f(x) = c . (x / |x|): broadcast carries the norm into the
        // elementwise division, so its backward is exercised too.
        let x0 = [0.8, -0.5, 0.3, 1.2];
        let c = [0.4, -1.1, 0.7, 0.2];
        let tape = Tape::new();
        let x = tape.leaf(&vec_tensor(&x0).with_grad());
        let cv = tape.constant_vec(c.to_vec());
        let unit = x.div(x.sq_l2().sqrt().broadcast(4)).unwrap();
        let loss = unit.mul(cv).unwrap().sum();
        tape.backward(loss).unwrap();
        let got = tape.grad(x).unwrap();

        let f = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().zip(c.iter()).map(|(x, ci)| ci * x / n).sum::<f64>()
        };
        let numeric = gradcheck::central_diff(&f, &x0, 1e-5);
        let report = gradcheck::compare(got.data(), &numeric);
        assert!(report.max_rel < 1e-6, "rel err {}", report.max_rel);
    }

    #[test]
    fn broadcast_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.5).with_grad());
        let y = x.broadcast(3);
        assert_eq!(y.value().data(), &[2.5, 2.5, 2.5]);
        let w = tape.constant_vec(vec![1.0, 10.0, 100.0]);
        tape.backward(y.mul(w).unwrap().sum()).unwrap();
        // Each copy passes its weight back; the scalar collects the sum.
        assert_eq!(tape.grad(x).unwrap().data(), &[111.0]);
    }

    #[test]
    fn detached_branch_contributes_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&vec_tensor(&[1.0, -2.0]).with_grad());
        let frozen = x.scale(3.0).detach();
        let loss = x.mul(frozen).unwrap().sum();
        tape.backward(loss).unwrap();
        // d/dx (x * detach(3x)) = detach(3x) only
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0).with_grad());
        let loss = x.mul(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss).unwrap_err(), Error::TapeConsumed));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&vec_tensor(&[1.0, 2.0]).with_grad());
        let y = x.scale(2.0);
        match tape.backward(y).unwrap_err() {
            Error::NonScalarLoss { shape } => assert_eq!(shape, vec![2]),
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn cosine_endpoints() {
        let tape = Tape::new();
        let a = tape.leaf(&vec_tensor(&[0.5, -1.0, 2.0]));
        let na = a.neg();
        assert!((cosine_similarity(a, a).unwrap().value().item() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(a, na).unwrap().value().item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(&vec_tensor(&[1.0, 2.0]));
        let z = tape.leaf(&vec_tensor(&[0.0, 0.0]));
        assert!(matches!(
            cosine_similarity(a, z).unwrap_err(),
            Error::ZeroNorm { .. }
        ));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let mut rng = crate::rng::stream(12, "gradcheck", 1);
        let b_fixed = Tensor::randn(&mut rng, &[5], 1.0);
        let a0 = Tensor::randn(&mut rng, &[5], 1.0);

        let f = |a_data: &[f64]| {
            let tape = Tape::new();
            let a = tape.leaf(&vec_tensor(a_data));
            let b = tape.leaf(&b_fixed);
            cosine_similarity(a, b).unwrap().value().item()
        };
        let numeric = gradcheck::central_diff(f, a0.data(), 1e-5);

        let tape = Tape::new();
        let a = tape.leaf(&a0.clone().with_grad());
        let b = tape.leaf(&b_fixed);
        let loss = cosine_similarity(a, b).unwrap();
        tape.backward(loss).unwrap();
        let report = gradcheck::compare(tape.grad(a).unwrap().data(), &numeric);
        assert!(report.max_rel < 1e-6, "max rel err {}", report.max_rel);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(&vec_tensor(&[1.0, 2.0]).with_grad());
        let b = tape.leaf(&vec_tensor(&[3.0]).with_grad());
        let joined = Var::concat(&[a, b]).unwrap();
        assert_eq!(joined.value().data(), &[1.0, 2.0, 3.0]);
        let w = tape.constant_vec(vec![10.0, 20.0, 30.0]);
        let loss = joined.mul(w).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn linear_layer_value() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let b = tape.leaf(&vec_tensor(&[0.5, -0.5]));
        let x = tape.leaf(&vec_tensor(&[7.0, 8.0, 9.0]));
        let y = linear(w, b, x).unwrap();
        assert_eq!(y.value().data(), &[7.5, 7.5]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = crate::rng::stream(5, "det", 0);
            let x0 = Tensor::randn(&mut rng, &[6], 1.0).with_grad();
            let w0 = Tensor::randn(&mut rng, &[4, 6], 0.3);
            let b0 = Tensor::randn(&mut rng, &[4], 0.1);
            let tape = Tape::new();
            let x = tape.leaf(&x0);
            let w = tape.constant(&w0);
            let b = tape.constant(&b0);
            let loss = linear(w, b, x).unwrap().softplus().sq_l2();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()
        };
        assert_eq!(run(), run());
    }

    /// Central-difference check of every primitive, driving each through
    /// a scalarizing head so the full chain is exercised.
    #[test]
    fn all_primitives_match_finite_differences() {
        let mut rng = crate::rng::stream(42, "gradcheck", 2);
        let n = 6;
        let other = Tensor::randn(&mut rng, &[n], 1.0);
        // Offset keeps div/sqrt away from zero while staying generic.
        let other_pos: Tensor = {
            let d: Vec<f64> = other.data().iter().map(|x| x.abs() + 0.7).collect();
            Tensor::from_vec(&[n], d).unwrap()
        };

        type Builder = for<'t> fn(Var<'t>, Var<'t>, Var<'t>) -> Var<'t>;
        let cases: Vec<(&str, Builder)> = vec![
            ("add", |x, o, _| x.add(o).unwrap().sq_l2()),
            ("sub", |x, o, _| x.sub(o).unwrap().sq_l2()),
            ("mul", |x, o, _| x.mul(o).unwrap().sq_l2()),
            ("div", |x, _, p| x.div(p).unwrap().sq_l2()),
            ("div_denominator", |x, o, _| o.div(x).unwrap().sq_l2()),
            ("add_scalar", |x, _, _| x.add_scalar(1.3).sq_l2()),
            ("scale", |x, _, _| x.scale(-2.5).sq_l2()),
            ("neg", |x, _, _| x.neg().sq_l2()),
            ("sqrt", |x, _, _| x.sqrt().sum()),
            ("softplus", |x, _, _| x.activate(Activation::Softplus).sq_l2()),
            ("tanh", |x, _, _| x.activate(Activation::Tanh).sq_l2()),
            ("sum", |x, _, _| x.sum()),
            ("mean", |x, o, _| x.mul(o).unwrap().mean()),
            ("sq_l2", |x, _, _| x.sq_l2()),
            ("reshape", |x, o, _| {
                x.reshape(&[2, 3]).unwrap().matmul(o.reshape(&[3, 2]).unwrap()).unwrap().sq_l2()
            }),
            ("concat", |x, o, _| Var::concat(&[x, o]).unwrap().sq_l2()),
        ];

        for (name, build) in cases {
            for case in 0..4 {
                let x0 = if name == "sqrt" || name == "div_denominator" {
                    let raw = Tensor::randn(&mut rng, &[n], 1.0);
                    let d: Vec<f64> = raw.data().iter().map(|x| x.abs() + 0.5).collect();
                    Tensor::from_vec(&[n], d).unwrap()
                } else {
                    Tensor::randn(&mut rng, &[n], 1.0)
                };

                let eval = |data: &[f64]| {
                    let tape = Tape::new();
                    let x = tape.leaf(&vec_tensor(data));
                    let o = tape.leaf(&other);
                    let p = tape.leaf(&other_pos);
                    build(x, o, p).value().item()
                };
                let numeric = gradcheck::central_diff(eval, x0.data(), 1e-5);

                let tape = Tape::new();
                let x = tape.leaf(&x0.clone().with_grad());
                let o = tape.leaf(&other);
                let p = tape.leaf(&other_pos);
                let loss = build(x, o, p);
                tape.backward(loss).unwrap();
                let analytic = tape.grad(x).unwrap();
                let report = gradcheck::compare(analytic.data(), &numeric);
                assert!(
                    report.max_rel < 1e-6,
                    "{name} case {case}: max rel err {}",
                    report.max_rel
                );
            }
        }
    }
}
