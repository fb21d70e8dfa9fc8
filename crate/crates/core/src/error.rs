use std::path::PathBuf;

use crate::numerics::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True when a NaN or infinity was produced during computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Tensor(TensorError::NonFinite { .. }))
    }
}
