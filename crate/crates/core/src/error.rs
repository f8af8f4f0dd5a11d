use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QdstError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QdstError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("missing documents: {}", .0.join(", "))]
    MissingDocument(Vec<String>),

    #[error("{path}:{line}: {message}")]
    ParseError {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl QdstError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
