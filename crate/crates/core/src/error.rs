use std::io;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("unknown key: {0:?}")]
    UnknownKey(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate id: {0:?}")]
    DuplicateId(String),

    #[error("datastore must contain at least one record")]
    EmptyDatastore,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("cross-attention needs at least one retrieved embedding")]
    EmptyRetrieval,

    #[error("token index {index} out of range for prefix of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no ground-truth entities in any instance")]
    NoGroundTruth,

    #[error("synthetic embedding rejected by quality gate (score {score:.4} < {threshold})")]
    QualityRejected { score: f64, threshold: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dims(expected: usize, actual: usize) -> Self {
        Error::DimMismatch { expected, actual }
    }

    /// Process exit code for the command-line front end: 3 for invariant
    /// violations, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
