use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: String },
    #[error("saved activations do not match this call: {0}")]
    StaleState(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match the requested configuration: {0}")]
    CheckpointMismatch(String),
    #[error("dataset generation: {0}")]
    Dataset(String),
    #[error("training diverged at iteration {iteration}: non-finite {stage}")]
    Diverged { iteration: usize, stage: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Decoding failures of the binary tensor format. Each variant has a stable
/// numeric code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"LSDT\"")]
    BadMagic,
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("rank {0} outside 1..=5")]
    RankOutOfRange(u32),
    #[error("truncated payload: header declares {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic => 1,
            FormatError::BadHeader(_) => 2,
            FormatError::UnsupportedVersion(_) => 3,
            FormatError::RankOutOfRange(_) => 4,
            FormatError::TruncatedPayload { .. } => 5,
        }
    }
}
