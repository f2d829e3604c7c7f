use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{op}: point cloud is empty")]
    EmptyCloud { op: &'static str },
    #[error("{op}: non-finite coordinate in point {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("crop expects exactly {expected} points, got {got}")]
    CropSize { expected: usize, got: usize },
    #[error("marching cubes needs resolution at least {min}, got {got}")]
    Resolution { min: usize, got: usize },
    #[error("grid of resolution {resolution} needs {expected} values, got {got}")]
    GridSize {
        resolution: usize,
        expected: usize,
        got: usize,
    },
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but the mesh has {count}")]
    BadIndex {
        triangle: usize,
        index: usize,
        count: usize,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("surface sampling gave up: {0}")]
    Sampling(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;
