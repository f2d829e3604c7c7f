//! Define-by-run gradient tape.
//!
//! Every operation on a [`Tape`] computes its value eagerly. When the tape is
//! recording and at least one operand is tracked, the operation is appended to
//! the tape together with whatever it needs for its vector-Jacobian product.
//! Node indices therefore form a topological order by construction, and
//! [`Tape::backward`] simply walks them in reverse.

use std::borrow::Cow;
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{check_finite, gemm_strided, numel, split_axis, MatmulPlan, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Elementwise operation codes. Binary codes require a second operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    Gelu,
    Tanh,
    Abs,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Neg => "neg",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Sqrt => "sqrt",
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Tanh => "tanh",
            Self::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// A value flowing through a tape, optionally linked to a tape node.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl Var {
    /// An untracked value; gradients never flow into it.
    pub fn constant(value: Tensor) -> Self {
        Self {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Binary { kind: ElementwiseOp, a: Var, b: Var },
    Unary { kind: ElementwiseOp, a: Var },
    Affine { a: Var, scale: f64 },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Sum { a: Var, axis: Option<usize> },
    Mean { a: Var, axis: Option<usize> },
    Max { a: Var, argmax: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Records operations for reverse-mode differentiation. Confined to one thread.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Accumulated gradient of a parameter, summed over every leaf bound to it.
    pub fn param(&self, index: usize) -> Option<&Tensor> {
        self.params.get(&index)
    }

    pub fn param_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    /// Gradient with respect to a tracked variable (zeros if it did not reach the loss).
    pub fn wrt(&self, var: &Var) -> Option<Tensor> {
        let id = var.node?;
        let slot = self.by_node.get(id)?;
        Some(match slot {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(var.value()),
        })
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Maps an output flat index to an operand flat index.
enum IndexMap {
    Same,
    Modulo(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    /// Operand values laid out like the `n`-element output.
    fn expand<'a>(&self, src: &'a [f64], n: usize) -> Cow<'a, [f64]> {
        match self {
            IndexMap::Same => Cow::Borrowed(src),
            IndexMap::Modulo(k) => Cow::Owned(src.repeat(n / k)),
            IndexMap::Table(t) => Cow::Owned(t.iter().map(|&i| src[i]).collect()),
        }
    }
}

/// Right-aligned broadcast: each aligned pair of dimensions must match or one must be 1.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn index_map(out: &[usize], input: &[usize]) -> IndexMap {
    if out == input {
        return IndexMap::Same;
    }
    let n_in = numel(input);
    // A suffix of the output shape repeats in blocks.
    let stripped: &[usize] = {
        let lead = input.iter().take_while(|&&d| d == 1).count();
        &input[lead..]
    };
    if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == *stripped {
        return IndexMap::Modulo(n_in.max(1));
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = s;
        }
        s *= input[i];
    }
    let total = numel(out);
    let mut table = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        table.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    IndexMap::Table(table)
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
fn reduce_to(grad: Vec<f64>, out_shape: &[usize], shape: &[usize]) -> Tensor {
    if out_shape == shape {
        return Tensor::from_raw(shape.to_vec(), grad);
    }
    let map = index_map(out_shape, shape);
    let mut acc = vec![0.0; numel(shape)];
    match map {
        IndexMap::Same => acc = grad,
        IndexMap::Modulo(k) => {
            for chunk in grad.chunks(k) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
        }
        IndexMap::Table(t) => {
            for (&i, g) in t.iter().zip(grad) {
                acc[i] += g;
            }
        }
    }
    Tensor::from_raw(shape.to_vec(), acc)
}

// ---------------------------------------------------------------------------

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every result is an untracked constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var::constant(value)
    }

    /// A tracked input leaf whose gradient can be queried with [`Gradients::wrt`].
    pub fn watch(&self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), None)
    }

    /// A trainable leaf bound to parameter slot `index`.
    pub fn param(&self, index: usize, value: &Arc<Tensor>) -> Var {
        self.leaf(Arc::clone(value), Some(index))
    }

    fn leaf(&self, value: Arc<Tensor>, param: Option<usize>) -> Var {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf { param },
            value: Arc::clone(&value),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    fn record(&self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        let value = Arc::new(value);
        if !(self.recording && tracked) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: op(),
            value: Arc::clone(&value),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    // -- elementwise --------------------------------------------------------

    pub fn elementwise(&self, op: ElementwiseOp, a: &Var, b: Option<&Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(TensorError::Domain {
                op: op.name(),
                detail: "binary operation needs two operands".into(),
            }),
            (false, Some(_)) => Err(TensorError::Domain {
                op: op.name(),
                detail: "unary operation takes one operand".into(),
            }),
        }
    }

    fn binary(&self, kind: ElementwiseOp, a: &Var, b: &Var) -> Result<Var> {
        let name = kind.name();
        let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
        let (ma, mb) = (
            index_map(&out_shape, a.shape()),
            index_map(&out_shape, b.shape()),
        );
        let (ad, bd) = (a.value.data(), b.value.data());
        let n = numel(&out_shape);
        if kind == ElementwiseOp::Div && bd.contains(&0.0) {
            return Err(TensorError::Domain {
                op: name,
                detail: "division by zero".into(),
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
            _ => |x, y| x / y,
        };
        let (ae, be) = (ma.expand(ad, n), mb.expand(bd, n));
        let data: Vec<f64> = ae.iter().zip(be.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::checked(name, out_shape, data)?;
        Ok(self.record(value, a.is_tracked() || b.is_tracked(), || Op::Binary {
            kind,
            a: a.clone(),
            b: b.clone(),
        }))
    }

    fn unary(&self, kind: ElementwiseOp, a: &Var) -> Result<Var> {
        let name = kind.name();
        let x = a.value.data();
        match kind {
            ElementwiseOp::Log if x.iter().any(|&v| v <= 0.0) => {
                return Err(TensorError::Domain {
                    op: name,
                    detail: "logarithm of a non-positive value".into(),
                })
            }
            ElementwiseOp::Sqrt if x.iter().any(|&v| v < 0.0) => {
                return Err(TensorError::Domain {
                    op: name,
                    detail: "square root of a negative value".into(),
                })
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            ElementwiseOp::Neg => |v| -v,
            ElementwiseOp::Exp => f64::exp,
            ElementwiseOp::Log => f64::ln,
            ElementwiseOp::Sqrt => f64::sqrt,
            ElementwiseOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
            ElementwiseOp::Gelu => gelu,
            ElementwiseOp::Tanh => f64::tanh,
            ElementwiseOp::Abs => f64::abs,
            _ => unreachable!("binary op routed to unary"),
        };
        let value = a.value.map(name, f)?;
        Ok(self.record(value, a.is_tracked(), || Op::Unary {
            kind,
            a: a.clone(),
        }))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn neg(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Neg, a)
    }

    pub fn exp(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn log(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn sqrt(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Sqrt, a)
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn gelu(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Gelu, a)
    }

    pub fn tanh(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Tanh, a)
    }

    pub fn abs(&self, a: &Var) -> Result<Var> {
        self.unary(ElementwiseOp::Abs, a)
    }

    /// `a * scale`.
    pub fn scale(&self, a: &Var, scale: f64) -> Result<Var> {
        let value = a.value.map("scale", |v| v * scale)?;
        Ok(self.record(value, a.is_tracked(), || Op::Affine {
            a: a.clone(),
            scale,
        }))
    }

    /// `a + shift`, elementwise.
    pub fn add_scalar(&self, a: &Var, shift: f64) -> Result<Var> {
        let value = a.value.map("add_scalar", |v| v + shift)?;
        Ok(self.record(value, a.is_tracked(), || Op::Affine {
            a: a.clone(),
            scale: 1.0,
        }))
    }

    // -- linear algebra -----------------------------------------------------

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.matmul(&b.value)?;
        Ok(self.record(value, a.is_tracked() || b.is_tracked(), || Op::MatMul {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let value = a.value.transpose()?;
        Ok(self.record(value, a.is_tracked(), || Op::Transpose { a: a.clone() }))
    }

    pub fn reshape(&self, a: &Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = a.value.reshape(shape)?;
        Ok(self.record(value, a.is_tracked(), || Op::Reshape { a: a.clone() }))
    }

    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&values, axis)?;
        let tracked = parts.iter().any(|p| p.is_tracked());
        Ok(self.record(value, tracked, || Op::Concat {
            parts: parts.iter().map(|&p| p.clone()).collect(),
            axis,
        }))
    }

    pub fn slice(&self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = a.value.slice(axis, start, len)?;
        Ok(self.record(value, a.is_tracked(), || Op::Slice {
            a: a.clone(),
            axis,
            start,
        }))
    }

    /// Cuts the gradient path.
    pub fn detach(&self, a: &Var) -> Var {
        Var {
            value: Arc::clone(&a.value),
            node: None,
        }
    }

    // -- reductions ---------------------------------------------------------

    /// Reduces over `axis` (removing it) or over every element when `axis` is `None`.
    ///
    /// `Max` routes its gradient to the lowest flat index among tied maxima.
    pub fn reduce(&self, op: ReduceOp, a: &Var, axis: Option<usize>) -> Result<Var> {
        let shape = a.shape();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
        }
        if a.value.numel() == 0 {
            return Err(TensorError::Empty { op: "reduce" });
        }
        let (outer, len, inner) = match axis {
            Some(ax) => split_axis(shape, ax),
            None => (1, a.value.numel(), 1),
        };
        let out_shape: Vec<usize> = match axis {
            Some(ax) => shape
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != ax)
                .map(|(_, &d)| d)
                .collect(),
            None => Vec::new(),
        };
        let x = a.value.data();
        let mut out = vec![0.0; outer * inner];
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let inv = len as f64;
                    out.iter_mut().for_each(|v| *v /= inv);
                }
                let value = Tensor::checked("reduce", out_shape, out)?;
                Ok(self.record(value, a.is_tracked(), || {
                    if op == ReduceOp::Sum {
                        Op::Sum { a: a.clone(), axis }
                    } else {
                        Op::Mean { a: a.clone(), axis }
                    }
                }))
            }
            ReduceOp::Max => {
                let mut argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let idx = (o * len + l) * inner + i;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out[o * inner + i] = x[best];
                        argmax[o * inner + i] = best;
                    }
                }
                let value = Tensor::from_raw(out_shape, out);
                Ok(self.record(value, a.is_tracked(), || Op::Max {
                    a: a.clone(),
                    argmax,
                }))
            }
        }
    }

    pub fn sum(&self, a: &Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&self, a: &Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn max(&self, a: &Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Max, a, axis)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, a: &Var, axis: usize) -> Result<Var> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let x = a.value.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    y[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[at(l)] /= z;
                }
            }
        }
        let value = Tensor::checked("softmax", shape.to_vec(), y)?;
        Ok(self.record(value, a.is_tracked(), || Op::Softmax {
            a: a.clone(),
            axis,
        }))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance,
    /// with `eps` added to the (population) variance.
    pub fn layer_norm(&self, a: &Var, eps: f64) -> Result<Var> {
        let shape = a.shape();
        let n = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        if n < 2 {
            return Err(TensorError::Domain {
                op: "layer_norm",
                detail: "normalized axis needs at least two entries".into(),
            });
        }
        let x = a.value.data();
        let rows = x.len() / n;
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (out, v) in y[r * n..(r + 1) * n].iter_mut().zip(row) {
                *out = (v - mean) * inv;
            }
        }
        let value = Tensor::checked("layer_norm", shape.to_vec(), y)?;
        Ok(self.record(value, a.is_tracked(), || Op::LayerNorm {
            a: a.clone(),
            inv_std,
        }))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let nodes = self.nodes.into_inner();
        if nodes.is_empty() {
            return Err(TensorError::Empty { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if let Some(id) = loss.node {
            grads[id] = Some(Tensor::ones(loss.shape().to_vec()));
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for (id, node) in nodes.iter().enumerate().rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            check_finite("backward", g.data())?;
            if let Op::Leaf { .. } = node.op {
                leaf_grads[id] = Some(g);
                continue;
            }
            propagate(&node.op, &node.value, g, &mut grads)?;
        }

        let mut params: HashMap<usize, Tensor> = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                let g = leaf_grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros_like(&node.value));
                match params.get_mut(&p) {
                    Some(acc) => acc.add_assign_same(&g),
                    None => {
                        params.insert(p, g);
                    }
                }
            }
        }
        Ok(Gradients {
            by_node: leaf_grads,
            params,
        })
    }
}

/// `tanh` through a single `exp`, several times cheaper than the libm call.
/// Small arguments use the odd Taylor series to avoid cancellation.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let a = u.abs();
    let t = if a < 0.01 {
        let a2 = a * a;
        a * (1.0 - a2 / 3.0 * (1.0 - 0.4 * a2))
    } else if a > 20.0 {
        1.0
    } else {
        1.0 - 2.0 / ((2.0 * a).exp() + 1.0)
    };
    t.copysign(u)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = fast_tanh(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(grads: &mut [Option<Tensor>], var: &Var, g: Tensor) {
    let Some(id) = var.node else { return };
    match &mut grads[id] {
        Some(acc) => acc.add_assign_same(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    match op {
        Op::Leaf { .. } => {}
        Op::Binary { kind, a, b } => {
            let out_shape = out.shape();
            let (ma, mb) = (index_map(out_shape, a.shape()), index_map(out_shape, b.shape()));
            let (ad, bd, gd) = (a.value.data(), b.value.data(), g.data());
            let n = gd.len();
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                ElementwiseOp::Add => (gd.to_vec(), gd.to_vec()),
                ElementwiseOp::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                ElementwiseOp::Mul => {
                    let (ae, be) = (ma.expand(ad, n), mb.expand(bd, n));
                    (
                        gd.iter().zip(be.iter()).map(|(g, y)| g * y).collect(),
                        gd.iter().zip(ae.iter()).map(|(g, x)| g * x).collect(),
                    )
                }
                _ => {
                    let (ae, be) = (ma.expand(ad, n), mb.expand(bd, n));
                    (
                        gd.iter().zip(be.iter()).map(|(g, y)| g / y).collect(),
                        gd.iter()
                            .zip(ae.iter().zip(be.iter()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    )
                }
            };
            if a.is_tracked() {
                accumulate(grads, a, reduce_to(ga, out_shape, a.shape()));
            }
            if b.is_tracked() {
                accumulate(grads, b, reduce_to(gb, out_shape, b.shape()));
            }
        }
        Op::Unary { kind, a } => {
            let (x, y, gd) = (a.value.data(), out.data(), g.data());
            let dx: Vec<f64> = match kind {
                ElementwiseOp::Neg => gd.iter().map(|v| -v).collect(),
                ElementwiseOp::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                ElementwiseOp::Log => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                ElementwiseOp::Sqrt => gd.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect(),
                ElementwiseOp::Relu => gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
                ElementwiseOp::Gelu => gd.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect(),
                ElementwiseOp::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                ElementwiseOp::Abs => gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                _ => unreachable!("binary op recorded as unary"),
            };
            accumulate(grads, a, Tensor::checked("backward", a.shape().to_vec(), dx)?);
        }
        Op::Affine { a, scale } => {
            let dx = g.map_raw(|v| v * scale);
            accumulate(grads, a, Tensor::from_raw(a.shape().to_vec(), dx));
        }
        Op::MatMul { a, b } => {
            let plan = MatmulPlan::new(a.shape(), b.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let gd = g.data();
            if a.is_tracked() {
                // dA = G · Bᵀ
                let mut da = vec![0.0; plan.batch * m * k];
                if plan.shared_rhs {
                    gemm_strided(gd, (n, 1), b.value.data(), (1, n), &mut da, plan.batch * m, n, k);
                } else {
                    for bi in 0..plan.batch {
                        gemm_strided(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &b.value.data()[bi * k * n..(bi + 1) * k * n],
                            (1, n),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                accumulate(grads, a, Tensor::from_raw(a.shape().to_vec(), da));
            }
            if b.is_tracked() {
                // dB = Aᵀ · G, summed over the batch when B is shared.
                let mut db = vec![0.0; b.value.numel()];
                if plan.shared_rhs {
                    let rows = plan.batch * m;
                    gemm_strided(a.value.data(), (1, k), gd, (n, 1), &mut db, k, rows, n);
                } else {
                    for bi in 0..plan.batch {
                        gemm_strided(
                            &a.value.data()[bi * m * k..(bi + 1) * m * k],
                            (1, k),
                            &gd[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                accumulate(grads, b, Tensor::from_raw(b.shape().to_vec(), db));
            }
        }
        Op::Transpose { a } => {
            accumulate(grads, a, g.transpose()?);
        }
        Op::Reshape { a } => {
            accumulate(grads, a, g.reshape(a.shape().to_vec())?);
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let shape = a.shape();
            let (outer, len, inner) = match axis {
                Some(ax) => split_axis(shape, *ax),
                None => (1, a.value.numel(), 1),
            };
            let factor = if matches!(op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let gd = g.data();
            let mut dx = vec![0.0; a.value.numel()];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, gv) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                        *d = gv * factor;
                    }
                }
            }
            accumulate(grads, a, Tensor::from_raw(shape.to_vec(), dx));
        }
        Op::Max { a, argmax } => {
            let mut dx = vec![0.0; a.value.numel()];
            for (gv, &idx) in g.data().iter().zip(argmax) {
                dx[idx] += gv;
            }
            accumulate(grads, a, Tensor::from_raw(a.shape().to_vec(), dx));
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = split_axis(a.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            accumulate(grads, a, Tensor::from_raw(a.shape().to_vec(), dx));
        }
        Op::LayerNorm { a, inv_std } => {
            let n = *a.shape().last().expect("layer_norm input has rank >= 1");
            let (y, gd) = (out.data(), g.data());
            let mut dx = vec![0.0; y.len()];
            for (r, inv) in inv_std.iter().enumerate() {
                let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                let g_mean = gr.iter().sum::<f64>() / n as f64;
                let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx[r * n + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                }
            }
            accumulate(grads, a, Tensor::from_raw(a.shape().to_vec(), dx));
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for p in parts {
                let len = p.shape()[*axis];
                if p.is_tracked() {
                    accumulate(grads, p, g.slice(*axis, start, len)?);
                }
                start += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let shape = a.shape();
            let (outer, dim, inner) = split_axis(shape, *axis);
            let len = g.shape()[*axis];
            let mut dx = vec![0.0; a.value.numel()];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = o * dim * inner + start * inner;
                dx[base..base + len * inner].copy_from_slice(src);
            }
            accumulate(grads, a, Tensor::from_raw(shape.to_vec(), dx));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::inference();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(tape.add(&a, &b).unwrap().value().data(), &[4.0, 6.0]);

        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.relu(&x).unwrap().value().data(), &[0.0, 0.0, 2.0]);

        let ones = tape.constant(Tensor::ones_like(x.value()));
        assert_eq!(tape.mul(&x, &ones).unwrap().value(), x.value());
    }

    #[test]
    fn elementwise_op_code_contract() {
        let tape = Tape::inference();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.elementwise(ElementwiseOp::Add, &a, None).is_err());
        assert!(tape.elementwise(ElementwiseOp::Exp, &a, Some(&a)).is_err());
        let e = tape.elementwise(ElementwiseOp::Exp, &a, None).unwrap();
        assert_eq!(e.value().data()[0], 1f64.exp());
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::inference();
        let neg = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(&neg), Err(TensorError::Domain { .. })));
        assert!(matches!(tape.sqrt(&neg), Err(TensorError::Domain { .. })));
        let zero = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(&neg, &zero), Err(TensorError::Domain { .. })));
        let big = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(&big), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::inference();
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let col = tape.constant(t(&[2, 1], &[100.0, 200.0]));
        assert_eq!(
            tape.add(&m, &row).unwrap().value().data(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        assert_eq!(
            tape.add(&m, &col).unwrap().value().data(),
            &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]
        );
        let bad = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(tape.add(&m, &bad).is_err());
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::inference();
        let v = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(tape.mean(&v, None).unwrap().item().unwrap(), 2.0);
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.sum(&m, Some(0)).unwrap().value().data(), &[4.0, 6.0]);
        let w = tape.constant(t(&[3], &[-5.0, -2.0, -9.0]));
        assert_eq!(tape.max(&w, None).unwrap().item().unwrap(), -2.0);
        assert!(matches!(
            tape.sum(&m, Some(2)),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.watch(t(&[4], &[1.0, 3.0, 3.0, 0.0]));
        let m = tape.max(&x, None).unwrap();
        let g = tape.backward(&m).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::inference();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.softmax(&z, 0).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(&big, 0).unwrap();
        // exp(-1000) underflows to 0 in f64; the exact value is ~5e-435.
        assert_eq!(s.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.watch(t(&[3], &[0.3, -1.0, 2.0]));
        let s = tape.sum(&x, None).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.watch(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq, None).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let tape = Tape::new();
        let x = tape.watch(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x),
            Err(TensorError::NotScalar { .. })
        ));
        let tape = Tape::new();
        let c = Var::constant(Tensor::scalar(1.0).unwrap());
        assert!(matches!(tape.backward(&c), Err(TensorError::Empty { .. })));
    }

    #[test]
    fn params_bound_twice_accumulate() {
        let p = Arc::new(t(&[2], &[1.0, 2.0]));
        let tape = Tape::new();
        let a = tape.param(0, &p);
        let b = tape.param(0, &p);
        let unused = tape.param(1, &Arc::new(t(&[3], &[0.0; 3])));
        let s = tape.add(&a, &b).unwrap();
        let s = tape.sum(&s, None).unwrap();
        let _ = unused;
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.param(1).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.watch(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(&x, &x).unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }
}
