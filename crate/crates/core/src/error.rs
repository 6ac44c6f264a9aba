use std::path::PathBuf;

use advnas_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("genotype error: {0}")]
    Genotype(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

/// Coarse failure classes, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
    Other,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Genotype(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => ErrorCategory::Data,
            Error::Divergence(_) => ErrorCategory::Divergence,
            Error::Tensor(TensorError::NonFinite(_)) => ErrorCategory::Divergence,
            _ => ErrorCategory::Other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
