use dsdf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` expects shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what}: expected feature dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("embedding dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("non-finite gradient for parameter `{name}`; step aborted")]
    NonFiniteGradient { name: String },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
