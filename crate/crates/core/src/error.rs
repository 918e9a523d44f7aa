use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum KanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("dataset has no timestamps")]
    NoTimestamps,

    #[error("invalid split ratios: {0}")]
    InvalidRatio(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("incomplete continual matrix: missing a[{row}][{col}]")]
    IncompleteMatrix { row: usize, col: usize },

    #[error("importance scores are only defined for KAN models")]
    NotKan,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = KanError> = std::result::Result<T, E>;
