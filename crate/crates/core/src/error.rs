use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A crop violates a structural invariant (overlapping branches, bad ids).
    #[error("structural integrity: {0}")]
    Integrity(String),

    /// A value is outside the domain allowed by its type.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in {path}: line {line}, column {column}: {message}", path = .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    /// A caller broke an operation precondition (shape mismatch, single class, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
