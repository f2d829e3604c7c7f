use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("slice [{start}, {start}+{len}) exceeds dimension {dim}")]
    SliceOutOfRange { start: usize, len: usize, dim: usize },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
