//! Crate-wide error type.
//!
//! Recoverable failures are reported through [`Error`]; broken internal
//! contracts (shape mismatches, double backward, out-of-range tape ids)
//! panic instead, since they indicate a bug in the caller rather than bad
//! input data.

use std::path::PathBuf;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A data file contained a row that could not be parsed.
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Inputs were well-formed but violate a documented requirement.
    #[error("validation error: {0}")]
    Validation(String),

    /// Cross-references between records do not hold (e.g. dangling edge).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// The operation needs data the inputs do not carry.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Underlying file I/O failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for bad data or arguments, 2 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
