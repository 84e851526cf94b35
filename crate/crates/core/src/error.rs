use std::path::PathBuf;

use deoe_nncore::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeoeError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {location}: {msg}")]
    Parse {
        path: PathBuf,
        location: String,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at iteration {iteration}, sequence {sequence}, frame {frame} ({detail})")]
    NonFiniteLoss {
        iteration: u64,
        sequence: usize,
        frame: usize,
        detail: String,
    },
    #[error("prediction and annotation timestamps disagree; orphaned frames: {orphaned:?}")]
    TimestampMismatch { orphaned: Vec<u64> },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DeoeError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(DeoeError::Invalid(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DeoeError {
    let path = path.into();
    move |source| DeoeError::Io { path, source }
}
