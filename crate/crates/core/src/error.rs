use std::path::PathBuf;

use ac2d_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("state: {0}")]
    State(String),
    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("version: {0}")]
    Version(String),
    #[error("specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
