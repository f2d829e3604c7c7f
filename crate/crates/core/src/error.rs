use std::path::PathBuf;

use dsdf_geometry::GeometryError;
use dsdf_nn::NnError;
use dsdf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{phase}: non-finite loss at step {step}; last good state saved to {}", .checkpoint.display())]
    NonFiniteLoss {
        phase: &'static str,
        step: u64,
        checkpoint: PathBuf,
    },
    #[error("{metric}: {detail}")]
    Metric { metric: &'static str, detail: String },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
