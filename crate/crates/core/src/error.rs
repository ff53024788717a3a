use std::path::PathBuf;

use thiserror::Error;

use crate::image::ImageError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid superpixel count {m} for {n} pixels: {reason}")]
    InvalidCount { m: usize, n: usize, reason: String },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
