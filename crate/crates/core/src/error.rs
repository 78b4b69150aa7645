use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum CaplError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed CAPLT data: {0}")]
    Format(String),

    #[error("missing data: {}", .0.display())]
    MissingData(PathBuf),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CaplError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CaplError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        CaplError::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CaplError>;
