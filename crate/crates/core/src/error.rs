use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{GradCheckError, TensorError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable label used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::NonFinite { .. }) => "numeric",
            Error::Tensor(_) => "contract",
            Error::GradCheck(_) => "protocol",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
