//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HvError {
    /// Shape or extent mismatch between operands.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An index addressed a row/voxel/pixel outside its container.
    #[error("index {index} out of range (bound {bound}) in {op}")]
    Bounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Degenerate geometry or other mathematically invalid input.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed external file contents.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Weight archive inconsistency (missing/mismatched parameter, bad fingerprint).
    #[error("weight archive error: {0}")]
    Archive(String),

    /// Invalid model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HvError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        HvError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HvError>;
