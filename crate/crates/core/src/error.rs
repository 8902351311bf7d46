use std::path::PathBuf;

use thiserror::Error;

use crate::spectral::Representation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("expected a field in {expected:?} representation, got {found:?}")]
    WrongRepresentation {
        expected: Representation,
        found: Representation,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("coarsening factor {factor} does not divide grid {nx}x{ny}")]
    IndivisibleFactor { factor: usize, nx: usize, ny: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state after step {step}")]
    NonFinite { step: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linear solve failed: {0}")]
    Linalg(String),

    #[error("state dimension {dim} exceeds the dense threshold {threshold}")]
    DenseThreshold { dim: usize, threshold: usize },

    #[error("malformed {format} file {path}: {reason}")]
    Format {
        format: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
