use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("incompatible: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
