use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RtnError>;

#[derive(Debug, Error)]
pub enum RtnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("fusion shape error: expected {expected:?}, got {actual:?}")]
    FusionShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("input too small: {height}x{width} (both sides must be at least 32)")]
    InputTooSmall { height: usize, width: usize },

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("ingestion error in entry {entry}: {reason}")]
    Ingestion { entry: String, reason: String },

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RtnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RtnError::Io {
            path: path.into(),
            source,
        }
    }
}
