use std::path::Path;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("document {0:?} has no embeddings")]
    EmptyDocument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),

    #[error("version mismatch in {path}: expected {expected}, got {got}")]
    VersionMismatch {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("embedding ordinal {0} already present in index")]
    DuplicateOrdinal(u32),

    #[error("index must be trained before use")]
    UntrainedIndex,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no usable data: {0}")]
    NoData(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn malformed(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
