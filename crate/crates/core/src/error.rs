//! Error types shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by tensor I/O, problem construction, and solving.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure (missing file, truncated payload, unwritable path).
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (bad magic, unsupported version, wrong ndim).
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid input with invalid values (non-finite, non-binary mask).
    #[error("validation error: {0}")]
    Validation(String),

    /// Dimension mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inconsistent or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Hessian finalized before any calibration sequence was accumulated.
    #[error("empty calibration: no sequences accumulated")]
    EmptyCalibration,

    /// Reduced system could not be factorized even after re-damping.
    #[error("singular system: {0}")]
    Singular(String),

    /// JSON (de)serialization failure for manifests and reports.
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
