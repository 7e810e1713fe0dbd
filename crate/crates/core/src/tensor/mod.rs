//! Dense `f64` tensors with tape-based reverse-mode automatic
//! differentiation.
//!
//! Tensors are immutable once built (parameter leaves may have their data
//! replaced between steps by the optimizer).  Every operation records its
//! inputs, so a computation graph is an implicit tape whose construction
//! order is already a topological order.  [`backward`] replays that tape in
//! reverse and accumulates gradients into parameter leaves; repeated calls
//! without [`Tensor::zero_grad`] keep accumulating.
//!
//! The graph is reference-counted and single-threaded by construction
//! (`Rc`), which matches the training loop: one computation graph per
//! thread, no shared mutable state.

mod kernels;
mod rng;

pub use rng::{streams, Rng};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Monotone id source; construction order doubles as topological order.
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Dense row-major `f64` tensor participating in an autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// Accumulated gradient; only populated on parameter leaves.
    grad: RefCell<Option<Vec<f64>>>,
    /// Leaf that the optimizer updates and `backward` writes gradients to.
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Relu(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Square(Tensor),
    Softplus(Tensor),
    Clamp(Tensor, f64, f64),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    MatrixExp(Tensor),
    Sum(Tensor),
    AddRowBroadcast(Tensor, Tensor),
    ConcatRows(Vec<Tensor>),
    SliceRows(Tensor, usize),
    RepeatRows(Tensor, usize),
    ConcatCols(Vec<Tensor>),
    PermuteCols(Tensor, Vec<usize>),
    EdgeAggregate {
        src: Tensor,
        dst: Tensor,
        weights: Tensor,
        groups: usize,
        batch: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::AddRowBroadcast(a, b) => {
                vec![a, b]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Softplus(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::MatrixExp(a)
            | Op::Sum(a)
            | Op::SliceRows(a, _)
            | Op::RepeatRows(a, _)
            | Op::PermuteCols(a, _) => vec![a],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
            Op::EdgeAggregate { src, dst, weights, .. } => vec![src, dst, weights],
        }
    }
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ---------------------------------------------------------------------------
// Construction and access
// ---------------------------------------------------------------------------

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        let needs_grad = requires_grad || op.parents().iter().any(|p| p.node.needs_grad);
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    fn check_shape(shape: &[usize], data: &[f64]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {}",
                shape_str(shape)
            )));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {} wants {} elements, got {}",
                shape_str(shape),
                numel_of(shape),
                data.len()
            )));
        }
        Ok(())
    }

    /// Constant tensor (no gradient).
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(&shape, &data)?;
        Ok(Tensor::new(shape, data, false, Op::Leaf))
    }

    /// Trainable leaf; `backward` accumulates its gradient and the
    /// optimizer may replace its data.
    pub fn parameter(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(&shape, &data)?;
        Ok(Tensor::new(shape, data, true, Op::Leaf))
    }

    /// Constant scalar (shape `[]`).
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![], vec![v], false, Op::Leaf)
    }

    /// Constant tensor of zeros.
    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        let n = numel_of(&shape);
        Tensor::constant(shape, vec![0.0; n])
    }

    /// Constant tensor of ones.
    pub fn ones(shape: Vec<usize>) -> Result<Tensor> {
        let n = numel_of(&shape);
        Tensor::constant(shape, vec![1.0; n])
    }

    /// Constant `n x n` identity matrix.
    pub fn eye(n: usize) -> Result<Tensor> {
        Tensor::constant(vec![n, n], kernels::identity(n))
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    fn rows(&self) -> Result<usize> {
        if self.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "expected a matrix, got shape {}",
                shape_str(self.shape())
            )));
        }
        Ok(self.node.shape[0])
    }

    fn cols(&self) -> Result<usize> {
        self.rows()?;
        Ok(self.node.shape[1])
    }

    /// Borrow the underlying values.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Copy the underlying values out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Dimension(format!(
                "item() on tensor of shape {}",
                shape_str(self.shape())
            )));
        }
        Ok(self.node.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.op, Op::Leaf)
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass has
    /// reached it since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Drop the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Replace the values of a leaf (optimizer update path).  Graph interior
    /// nodes are immutable; replacing them would silently desynchronize the
    /// tape, so only leaves accept new data.
    pub fn set_data(&self, new: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract(
                "set_data on a non-leaf tensor; interior nodes are immutable".into(),
            ));
        }
        if new.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "set_data length {} does not match shape {}",
                new.len(),
                shape_str(self.shape())
            )));
        }
        self.node.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

/// Shape of an elementwise binary op; operands must agree exactly or one
/// must be a one-element tensor that broadcasts over the other.
fn binary_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::Dimension(format!(
            "{what}: shapes {} and {} are not broadcast-compatible",
            shape_str(a.shape()),
            shape_str(b.shape())
        )))
    }
}

fn broadcast_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == 1 {
        b.iter().map(|&y| f(a[0], y)).collect()
    } else {
        a.iter().map(|&x| f(x, b[0])).collect()
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "add")?;
        let data = broadcast_zip(&self.data(), &other.data(), |x, y| x + y);
        Ok(Tensor::new(shape, data, false, Op::Add(self.clone(), other.clone())))
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "sub")?;
        let data = broadcast_zip(&self.data(), &other.data(), |x, y| x - y);
        Ok(Tensor::new(shape, data, false, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "mul")?;
        let data = broadcast_zip(&self.data(), &other.data(), |x, y| x * y);
        Ok(Tensor::new(shape, data, false, Op::Mul(self.clone(), other.clone())))
    }

    /// Add a plain constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::AddScalar(self.clone()))
    }

    /// Scale every element by a plain constant.
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::MulScalar(self.clone(), c))
    }

    /// Elementwise negation.
    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::Relu(self.clone()))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::Sigmoid(self.clone()))
    }

    /// Elementwise `e^x`.
    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::Exp(self.clone()))
    }

    /// Elementwise natural logarithm; every element must be positive.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Numeric(format!("ln of non-positive value {bad}")));
        }
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Ok(Tensor::new(self.shape().to_vec(), data, false, Op::Log(self.clone())))
    }

    /// Elementwise square.
    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * x).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::Square(self.clone()))
    }

    /// Elementwise `ln(1 + e^x)` (numerically stable).
    pub fn softplus(&self) -> Tensor {
        let data = self.data().iter().map(|&x| softplus_scalar(x)).collect();
        Tensor::new(self.shape().to_vec(), data, false, Op::Softplus(self.clone()))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the open
    /// interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::Contract(format!("clamp bounds [{lo}, {hi}] are inverted")));
        }
        let data = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Ok(Tensor::new(
            self.shape().to_vec(),
            data,
            false,
            Op::Clamp(self.clone(), lo, hi),
        ))
    }
}

// ---------------------------------------------------------------------------
// Linear algebra and structural operations
// ---------------------------------------------------------------------------

impl Tensor {
    /// Matrix product of two 2-D tensors, `(m x k) @ (k x n) -> (m x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows()?, self.cols()?);
        let (k2, n) = (other.rows()?, other.cols()?);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree, {} vs {}",
                shape_str(self.shape()),
                shape_str(other.shape())
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(m, k, n, &self.data(), &other.data(), 0.0, &mut out);
        Ok(Tensor::new(
            vec![m, n],
            out,
            false,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        let data = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        drop(data);
        Ok(Tensor::new(vec![n, m], out, false, Op::Transpose(self.clone())))
    }

    /// Matrix exponential of a square 2-D tensor (scaling-and-squaring).
    pub fn matrix_exp(&self) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        if m != n {
            return Err(Error::Dimension(format!(
                "matrix_exp needs a square matrix, got {}",
                shape_str(self.shape())
            )));
        }
        let out = kernels::expm(n, &self.data());
        Ok(Tensor::new(vec![n, n], out, false, Op::MatrixExp(self.clone())))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::new(vec![], vec![total], false, Op::Sum(self.clone()))
    }

    /// Sum of the main diagonal of a square matrix, as a scalar tensor.
    pub fn trace(&self) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        if m != n {
            return Err(Error::Dimension(format!(
                "trace needs a square matrix, got {}",
                shape_str(self.shape())
            )));
        }
        let eye = Tensor::eye(n)?;
        Ok(self.mul(&eye)?.sum())
    }

    /// Add a bias row (`[n]` or `[1, n]`) to every row of an `m x n` matrix.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        if bias.numel() != n {
            return Err(Error::Dimension(format!(
                "bias of shape {} does not fit matrix {}",
                shape_str(bias.shape()),
                shape_str(self.shape())
            )));
        }
        let data = self.data();
        let b = bias.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(data[i * n + j] + b[j]);
            }
        }
        drop(data);
        drop(b);
        Ok(Tensor::new(
            vec![m, n],
            out,
            false,
            Op::AddRowBroadcast(self.clone(), bias.clone()),
        ))
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let n = parts[0].cols()?;
        let mut rows = 0;
        for p in parts {
            if p.cols()? != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: column counts differ ({} vs {})",
                    n,
                    p.cols()?
                )));
            }
            rows += p.rows()?;
        }
        let mut out = Vec::with_capacity(rows * n);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::new(vec![rows, n], out, false, Op::ConcatRows(parts.to_vec())))
    }

    /// Contiguous row slice `[start, start + len)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        if len == 0 || start + len > m {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of bounds for {} rows",
                start + len,
                m
            )));
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::new(
            vec![len, n],
            out,
            false,
            Op::SliceRows(self.clone(), start),
        ))
    }

    /// Repeat every row of an `m x n` tensor `times` times consecutively,
    /// producing `(m * times) x n`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        if times == 0 {
            return Err(Error::Contract("repeat_rows with times = 0".into()));
        }
        let data = self.data();
        let mut out = Vec::with_capacity(m * times * n);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&data[i * n..(i + 1) * n]);
            }
        }
        drop(data);
        Ok(Tensor::new(
            vec![m * times, n],
            out,
            false,
            Op::RepeatRows(self.clone(), times),
        ))
    }

    /// Concatenate 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let m = parts[0].rows()?;
        let mut cols = 0;
        for p in parts {
            if p.rows()? != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    m,
                    p.rows()?
                )));
            }
            cols += p.cols()?;
        }
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            for p in parts {
                let w = p.cols()?;
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::new(vec![m, cols], out, false, Op::ConcatCols(parts.to_vec())))
    }

    /// Reorder columns: `out[:, j] = in[:, perm[j]]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "permute_cols: {:?} is not a permutation of 0..{n}",
                perm
            )));
        }
        let data = self.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in perm {
                out.push(data[i * n + p]);
            }
        }
        drop(data);
        Ok(Tensor::new(
            vec![m, n],
            out,
            false,
            Op::PermuteCols(self.clone(), perm.to_vec()),
        ))
    }
}

/// Weighted relu-of-pair-sum aggregation used by the message-passing
/// decoder.  With `src` and `dst` of shape `(groups * batch) x h` (rows of
/// group `g` at `g * batch ..`) and `weights` of shape `groups x groups`,
/// produces `out` of the same shape as `src` with
///
/// `out[i, r, :] = sum over k != i of weights[k, i] * relu(src[k, r, :] + dst[i, r, :])`.
///
/// This computes, in one fused step, every pairwise first-layer activation
/// of the edge MLP together with the edge-weighted sum that feeds the
/// node-update MLP; materializing the `groups^2` pairwise tensors
/// individually would dominate the training profile.
pub fn edge_aggregate(src: &Tensor, dst: &Tensor, weights: &Tensor, groups: usize, batch: usize) -> Result<Tensor> {
    let h = src.cols()?;
    if src.shape() != dst.shape() {
        return Err(Error::Dimension(format!(
            "edge_aggregate: src {} and dst {} disagree",
            shape_str(src.shape()),
            shape_str(dst.shape())
        )));
    }
    if src.rows()? != groups * batch {
        return Err(Error::Dimension(format!(
            "edge_aggregate: expected {} rows ({} groups x {} batch), got {}",
            groups * batch,
            groups,
            batch,
            src.rows()?
        )));
    }
    if weights.shape() != [groups, groups] {
        return Err(Error::Dimension(format!(
            "edge_aggregate: weights {} should be {groups}x{groups}",
            shape_str(weights.shape())
        )));
    }
    let s = src.data();
    let d = dst.data();
    let w = weights.data();
    let mut out = vec![0.0; groups * batch * h];
    for i in 0..groups {
        for k in 0..groups {
            if k == i {
                continue;
            }
            let wk = w[k * groups + i];
            if wk == 0.0 {
                continue;
            }
            for r in 0..batch {
                let srow = &s[(k * batch + r) * h..(k * batch + r + 1) * h];
                let drow = &d[(i * batch + r) * h..(i * batch + r + 1) * h];
                let orow = &mut out[(i * batch + r) * h..(i * batch + r + 1) * h];
                for c in 0..h {
                    let a = srow[c] + drow[c];
                    if a > 0.0 {
                        orow[c] += wk * a;
                    }
                }
            }
        }
    }
    drop(s);
    drop(d);
    drop(w);
    Ok(Tensor::new(
        vec![groups * batch, h],
        out,
        false,
        Op::EdgeAggregate {
            src: src.clone(),
            dst: dst.clone(),
            weights: weights.clone(),
            groups,
            batch,
        },
    ))
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Run reverse-mode differentiation from a scalar loss.  Gradients are
/// accumulated into every reachable parameter leaf; interior gradients are
/// scratch state local to this call, so calling `backward` twice on the
/// same graph exactly doubles the leaf gradients.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Dimension(format!(
            "backward needs a scalar loss, got shape {}",
            shape_str(loss.shape())
        )));
    }
    if !loss.node.needs_grad {
        return Err(Error::Contract(
            "backward on a graph with no trainable parameters".into(),
        ));
    }

    // Collect every gradient-carrying node reachable from the loss.  Ids are
    // assigned in construction order, so descending id order is a reverse
    // topological order.
    let mut reachable: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![loss.clone()];
    reachable.insert(loss.id(), loss.clone());
    while let Some(t) = stack.pop() {
        for p in t.node.op.parents() {
            if p.node.needs_grad && !reachable.contains_key(&p.id()) {
                reachable.insert(p.id(), p.clone());
                stack.push(p.clone());
            }
        }
    }
    let mut order: Vec<Tensor> = reachable.into_values().collect();
    order.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    for t in order {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if t.node.requires_grad {
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(g.iter()) {
                        *a += gi;
                    }
                }
                None => *slot = Some(g.clone()),
            }
        }
        propagate(&t, &g, &mut grads);
    }
    Ok(())
}

/// Gradient buffer for `t` inside the per-call scratch map.
fn buf<'a>(grads: &'a mut HashMap<u64, Vec<f64>>, t: &Tensor) -> &'a mut Vec<f64> {
    grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()])
}

fn wants(t: &Tensor) -> bool {
    t.node.needs_grad
}

/// Accumulate `±g` into a binary operand, reducing to a single element when
/// the operand broadcast.
fn accum_binary(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, g: &[f64], sign: f64) {
    if !wants(t) {
        return;
    }
    let dst = buf(grads, t);
    if dst.len() == g.len() {
        for (d, gi) in dst.iter_mut().zip(g.iter()) {
            *d += sign * gi;
        }
    } else {
        // operand was a broadcast scalar
        dst[0] += sign * g.iter().sum::<f64>();
    }
}

fn propagate(t: &Tensor, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match &t.node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum_binary(grads, a, g, 1.0);
            accum_binary(grads, b, g, 1.0);
        }
        Op::Sub(a, b) => {
            accum_binary(grads, a, g, 1.0);
            accum_binary(grads, b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let av = a.data();
            let bv = b.data();
            if wants(a) {
                let da = buf(grads, a);
                if da.len() == g.len() {
                    if bv.len() == g.len() {
                        for i in 0..g.len() {
                            da[i] += g[i] * bv[i];
                        }
                    } else {
                        for i in 0..g.len() {
                            da[i] += g[i] * bv[0];
                        }
                    }
                } else {
                    // a broadcast over b
                    da[0] += g.iter().zip(bv.iter()).map(|(gi, bi)| gi * bi).sum::<f64>();
                }
            }
            if wants(b) {
                let db = buf(grads, b);
                if db.len() == g.len() {
                    if av.len() == g.len() {
                        for i in 0..g.len() {
                            db[i] += g[i] * av[i];
                        }
                    } else {
                        for i in 0..g.len() {
                            db[i] += g[i] * av[0];
                        }
                    }
                } else {
                    db[0] += g.iter().zip(av.iter()).map(|(gi, ai)| gi * ai).sum::<f64>();
                }
            }
        }
        Op::AddScalar(a) => accum_binary(grads, a, g, 1.0),
        Op::MulScalar(a, c) => {
            if wants(a) {
                let da = buf(grads, a);
                for (d, gi) in da.iter_mut().zip(g.iter()) {
                    *d += c * gi;
                }
            }
        }
        Op::Relu(a) => {
            if wants(a) {
                let av = a.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if wants(a) {
                let y = t.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Exp(a) => {
            if wants(a) {
                let y = t.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    da[i] += g[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            if wants(a) {
                let av = a.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    da[i] += g[i] / av[i];
                }
            }
        }
        Op::Square(a) => {
            if wants(a) {
                let av = a.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    da[i] += 2.0 * av[i] * g[i];
                }
            }
        }
        Op::Softplus(a) => {
            if wants(a) {
                let av = a.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    da[i] += g[i] * sigmoid_scalar(av[i]);
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            if wants(a) {
                let av = a.data();
                let da = buf(grads, a);
                for i in 0..g.len() {
                    if av[i] > *lo && av[i] < *hi {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let m = a.node.shape[0];
            let k = a.node.shape[1];
            let n = b.node.shape[1];
            if wants(a) {
                let bv = b.data().clone();
                let da = buf(grads, a);
                kernels::mm_nt(m, n, k, g, &bv, 1.0, da);
            }
            if wants(b) {
                let av = a.data().clone();
                let db = buf(grads, b);
                kernels::mm_tn(k, m, n, &av, g, 1.0, db);
            }
        }
        Op::Transpose(a) => {
            if wants(a) {
                let m = a.node.shape[0];
                let n = a.node.shape[1];
                let da = buf(grads, a);
                // out is n x m, g indexed as [j, i]
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::MatrixExp(a) => {
            if wants(a) {
                let n = a.node.shape[0];
                let contribution = kernels::expm_vjp(n, &a.data(), g);
                let da = buf(grads, a);
                for (d, c) in da.iter_mut().zip(contribution.iter()) {
                    *d += c;
                }
            }
        }
        Op::Sum(a) => {
            if wants(a) {
                let da = buf(grads, a);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::AddRowBroadcast(a, bias) => {
            if wants(a) {
                let da = buf(grads, a);
                for (d, gi) in da.iter_mut().zip(g.iter()) {
                    *d += gi;
                }
            }
            if wants(bias) {
                let n = bias.numel();
                let db = buf(grads, bias);
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                if wants(p) {
                    let dp = buf(grads, p);
                    for (d, gi) in dp.iter_mut().zip(g[offset..offset + len].iter()) {
                        *d += gi;
                    }
                }
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            if wants(a) {
                let n = a.node.shape[1];
                let da = buf(grads, a);
                for (i, gi) in g.iter().enumerate() {
                    da[start * n + i] += gi;
                }
            }
        }
        Op::RepeatRows(a, times) => {
            if wants(a) {
                let n = a.node.shape[1];
                let da = buf(grads, a);
                for i in 0..a.node.shape[0] {
                    for r in 0..*times {
                        let row = &g[(i * times + r) * n..(i * times + r + 1) * n];
                        for (c, gv) in row.iter().enumerate() {
                            da[i * n + c] += gv;
                        }
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts.iter().map(|p| p.node.shape[1]).sum();
            let rows = parts[0].node.shape[0];
            let mut offset = 0;
            for p in parts {
                let w = p.node.shape[1];
                if wants(p) {
                    let dp = buf(grads, p);
                    for i in 0..rows {
                        for c in 0..w {
                            dp[i * w + c] += g[i * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::PermuteCols(a, perm) => {
            if wants(a) {
                let n = a.node.shape[1];
                let rows = a.node.shape[0];
                let da = buf(grads, a);
                for i in 0..rows {
                    for (j, &p) in perm.iter().enumerate() {
                        da[i * n + p] += g[i * n + j];
                    }
                }
            }
        }
        Op::EdgeAggregate {
            src,
            dst,
            weights,
            groups,
            batch,
        } => {
            let (groups, batch) = (*groups, *batch);
            let h = src.node.shape[1];
            let s = src.data().clone();
            let d = dst.data().clone();
            let w = weights.data().clone();
            let want_s = wants(src);
            let want_d = wants(dst);
            let want_w = wants(weights);
            let mut ds = if want_s { vec![0.0; s.len()] } else { vec![] };
            let mut dd = if want_d { vec![0.0; d.len()] } else { vec![] };
            let mut dw = if want_w { vec![0.0; w.len()] } else { vec![] };
            for i in 0..groups {
                for k in 0..groups {
                    if k == i {
                        continue;
                    }
                    let wk = w[k * groups + i];
                    let mut wsum = 0.0;
                    for r in 0..batch {
                        let so = (k * batch + r) * h;
                        let io = (i * batch + r) * h;
                        for c in 0..h {
                            let a = s[so + c] + d[io + c];
                            if a > 0.0 {
                                let gi = g[io + c];
                                if want_s {
                                    ds[so + c] += wk * gi;
                                }
                                if want_d {
                                    dd[io + c] += wk * gi;
                                }
                                if want_w {
                                    wsum += a * gi;
                                }
                            }
                        }
                    }
                    if want_w {
                        dw[k * groups + i] += wsum;
                    }
                }
            }
            if want_s {
                let slot = buf(grads, src);
                for (x, y) in slot.iter_mut().zip(ds.iter()) {
                    *x += y;
                }
            }
            if want_d {
                let slot = buf(grads, dst);
                for (x, y) in slot.iter_mut().zip(dd.iter()) {
                    *x += y;
                }
            }
            if want_w {
                let slot = buf(grads, weights);
                for (x, y) in slot.iter_mut().zip(dw.iter()) {
                    *x += y;
                }
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, requires_grad={})",
            self.id(),
            shape_str(self.shape()),
            self.requires_grad()
        )
    }
}
