//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! [`Tensor`] is a plain immutable value. A [`Tape`] evaluates operations
//! eagerly and, while recording, keeps enough of each operation to run the
//! reverse pass. [`Tape::inference`] gives the same API without recording,
//! which is what grid evaluation and sampling use.

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{central_difference, finite_diff_check, max_relative_error};
pub use tape::{ElementwiseOp, Gradients, ReduceOp, Tape, Var};
pub use tensor::Tensor;
