use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not conform for an operation.
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation produced or received a NaN/Inf value.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// Backward was requested on a non-scalar node.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Invalid configuration value.
    #[error("config: {0}")]
    Config(String),

    /// Invalid or inconsistent data (bad tags, out-of-range ids, ...).
    #[error("data: {0}")]
    Data(String),

    /// A dataset file could not be parsed.
    #[error("{path}:{line}: {message}")]
    DatasetParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A labeler response could not be parsed into tags.
    #[error("label parse failure: {reason}")]
    ParseFailure { reason: String, raw: String },

    /// The completion client failed after retries.
    #[error("labeler: {0}")]
    Labeler(String),

    /// Checkpoint file is malformed or has an unsupported version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
