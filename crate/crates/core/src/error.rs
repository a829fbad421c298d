use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask dimensions do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation's precondition failed (divisibility, ranges, empty inputs).
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid run-length encoding: {0}")]
    Rle(String),

    #[error("weight store mismatch: {0}")]
    WeightStore(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("i/o error")]
    Io(#[from] io::Error),

    #[error("json error")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let location = err
            .position()
            .map(|p| format!("line {}", p.line()))
            .unwrap_or_else(|| "unknown line".to_string());
        match err.into_kind() {
            csv::ErrorKind::Io(e) => Error::Io(e),
            other => Error::parse(location, format!("{other:?}")),
        }
    }
}
