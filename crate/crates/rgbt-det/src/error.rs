//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad key, inconsistent values, K not dividing C, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Index out of bounds.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Dataset layout or file-content problem; names the offending file.
    #[error("dataset integrity error: {path}: {reason}")]
    DataIntegrity { path: PathBuf, reason: String },

    /// Checkpoint file is unreadable or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Diverged(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::DataIntegrity {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code contract: 0 success, 1 usage, 2 data/integrity, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::DataIntegrity { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
            Error::Diverged(_) => 3,
            Error::Shape(_) | Error::Bounds(_) => 1,
        }
    }
}
