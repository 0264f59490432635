use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Structurally valid inputs that describe an impossible configuration
    /// (non-positive conv output, singleton batch-norm population, invalid
    /// network spec, image below the network's minimum footprint, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A metric that is undefined for the given inputs (e.g. AUC with a
    /// single class present).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed file contents: manifest rows, PNM headers, weight files.
    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
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
}

pub type Result<T> = std::result::Result<T, Error>;
