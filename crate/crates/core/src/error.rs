use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image payload {reference}: {message}")]
    Payload { reference: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown patch id {0}")]
    UnknownPatch(usize),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (batch ids {ids:?})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        step: usize,
        ids: Vec<usize>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
