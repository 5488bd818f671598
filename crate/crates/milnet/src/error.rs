//! Crate-wide error type.

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("feature extraction: {0}")]
    Feature(String),

    #[error("data: {0}")]
    Data(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training: {0}")]
    Train(String),

    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
