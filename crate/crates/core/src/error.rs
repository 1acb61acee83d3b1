use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("action {action} is not valid in state {state}")]
    InvalidAction { state: String, action: String },

    #[error("cannot step from a terminated state")]
    Terminated,

    #[error("sequence would exceed max_len {0}")]
    Overflow(usize),

    #[error("token {0:?} is outside the alphabet")]
    OutOfAlphabet(char),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{0}")]
    Infeasibility(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
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
        Error::Io { path: path.into(), source }
    }
}
