use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the cold-start pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate rating for user {user_id} and movie {movie_id} at {path}:{line}")]
    DuplicateRating {
        path: PathBuf,
        line: usize,
        user_id: u32,
        movie_id: u32,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix is not symmetric positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("unknown user index {0}")]
    UnknownUser(u32),

    #[error("unknown movie index {0}")]
    UnknownMovie(u32),

    #[error("question slot {0} was already asked")]
    RepeatedQuestion(usize),

    #[error("invalid rating {0}: expected 0..=5")]
    InvalidRating(u8),

    #[error("every action slot is masked")]
    AllActionsMasked,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid artifact {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
