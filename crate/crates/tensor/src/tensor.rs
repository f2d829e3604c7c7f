//! Dense row-major `f64` tensors and the raw kernels the tape builds on.

use std::fmt;

use crate::error::{Result, TensorError};

/// An immutable n-dimensional array of finite `f64` values, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<f64> = self.data.iter().take(PREVIEW).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, " ..{} more", self.data.len() - PREVIEW)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op, index });
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                len: data.len(),
            });
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    /// Caller guarantees `numel(shape) == data.len()` and finiteness.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    /// Like `from_raw` but checks finiteness, attributing failure to `op`.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Self::from_raw(shape, data))
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_raw(shape, vec![0.0; n])
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_raw(shape, vec![1.0; n])
    }

    pub fn ones_like(other: &Tensor) -> Self {
        Self::ones(other.shape.clone())
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_raw(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access for in-place parameter updates. Values written must be finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ElementCount {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Self::from_raw(shape, self.data.clone()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis { axis: 1, rank: r });
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = numel(&self.shape[..r - 2]);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            transpose_into(src, dst, m, n);
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self::from_raw(shape, out))
    }

    /// Matrix product over the last two axes.
    ///
    /// Accepts `[m,k]·[k,n]`, batched `[..,m,k]·[..,k,n]` with identical leading
    /// dimensions, and `[..,m,k]·[k,n]` where the right operand is shared.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &rhs.shape)?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        if plan.shared_rhs {
            gemm_acc(&self.data, &rhs.data, &mut out, plan.batch * plan.m, plan.k, plan.n);
            return Tensor::checked("matmul", plan.out_shape, out);
        }
        for b in 0..plan.batch {
            let a = &self.data[b * plan.m * plan.k..(b + 1) * plan.m * plan.k];
            let rb = if plan.shared_rhs { 0 } else { b };
            let bm = &rhs.data[rb * plan.k * plan.n..(rb + 1) * plan.k * plan.n];
            let c = &mut out[b * plan.m * plan.n..(b + 1) * plan.m * plan.n];
            gemm_acc(a, bm, c, plan.m, plan.k, plan.n);
        }
        Tensor::checked("matmul", plan.out_shape, out)
    }

    /// Elementwise map without finiteness checks on the result.
    pub(crate) fn map_raw(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data.iter().map(|&v| f(v)).collect()
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::checked(op, self.shape.clone(), self.map_raw(f))
    }

    /// Sum of all elements.
    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise `self + rhs` for identical shapes; used for gradient accumulation.
    pub(crate) fn add_assign_same(&mut self, rhs: &Tensor) {
        debug_assert_eq!(self.shape, rhs.shape);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let r = self.rank();
        if axis >= r {
            return Err(TensorError::InvalidAxis { axis, rank: r });
        }
        let dim = self.shape[axis];
        if start + len > dim {
            return Err(TensorError::SliceOutOfRange { start, len, dim });
        }
        let (outer, _, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_raw(shape, out))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let r = first.rank();
        if axis >= r {
            return Err(TensorError::InvalidAxis { axis, rank: r });
        }
        let mut total = 0;
        for p in parts {
            let compatible = p.rank() == r
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_raw(shape, out))
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn transpose_into(src: &[f64], dst: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Delegates to a blocked SIMD kernel. It is single-threaded and its
/// summation order depends only on the dimensions, so results are
/// reproducible run to run on one machine.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c += a · b` where `a` (m×k) and `b` (k×n) are read through
/// `(row stride, column stride)` pairs, so transposed operands need no copy.
pub(crate) fn gemm_strided(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cl: usize| (r - 1) * rs + (cl - 1) * cs;
    assert!(last(rsa, csa, m, k) < a.len() && last(rsb, csb, k, n) < b.len() && m * n <= c.len());
    // SAFETY: the assertion above keeps every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved dimensions of a (possibly batched) matrix product.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs.len() < 2 || rhs.len() < 2 {
            return Err(mismatch());
        }
        let (lr, rr) = (lhs.len(), rhs.len());
        let (m, k) = (lhs[lr - 2], lhs[lr - 1]);
        let (k2, n) = (rhs[rr - 2], rhs[rr - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lead = &lhs[..lr - 2];
        let shared_rhs = rr == 2;
        if !shared_rhs && &rhs[..rr - 2] != lead {
            return Err(mismatch());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        // A shared right operand is one big product over the flattened rows.
        let (batch, m) = if shared_rhs {
            (1, numel(lead) * m)
        } else {
            (numel(lead), m)
        };
        Ok(Self {
            batch,
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }
}
