//! Central finite differences as an independent oracle for tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Central-difference gradient of a scalar function of `x`.
pub fn central_difference<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-8)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "max_relative_error",
            lhs: analytic.shape().to_vec(),
            rhs: numeric.shape().to_vec(),
        });
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + REL_ERR_FLOOR))
        .fold(0.0, f64::max))
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the maximum relative error over coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let var = tape.watch(x.clone());
    let loss = f(&tape, &var)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .wrt(&var)
        .unwrap_or_else(|| Tensor::zeros_like(x));
    let numeric = central_difference(
        |probe| {
            let tape = Tape::inference();
            let v = tape.constant(probe.clone());
            f(&tape, &v)?.item()
        },
        x,
        eps,
    )?;
    max_relative_error(&analytic, &numeric)
}
