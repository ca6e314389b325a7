//! Error taxonomy shared across the workspace.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Mathematically degenerate input (e.g. zero-norm vector for cosine).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An operation received an empty collection where at least one element is required.
    #[error("empty input: {0}")]
    Empty(String),

    /// Non-finite values were produced or encountered.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch construction failed (mismatched list lengths, non-square matrix, ...).
    #[error("batch error: {0}")]
    Batch(String),

    /// Caption violates the token contract (missing EOS, bad ids, ...).
    #[error("malformed caption: {0}")]
    Caption(String),

    /// Learning-rate schedule queried outside its domain.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Binary container violated its layout; `offset` is the first bad byte.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
