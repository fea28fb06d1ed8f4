use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface. The CLI maps the variants onto its
/// documented exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint digest mismatch at {path}: expected {expected}, found {found}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("checkpoint is missing parameter array `{0}`")]
    MissingArray(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable process exit code: 2 config, 3 I/O, 4 numeric, 5 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 4,
            Error::Protocol(_) | Error::Data(_) | Error::Dimension(_) => 5,
            Error::Io { .. }
            | Error::Ingestion { .. }
            | Error::DigestMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::MissingArray(_)
            | Error::Checkpoint(_) => 3,
        }
    }
}
