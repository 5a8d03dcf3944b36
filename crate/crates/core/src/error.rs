use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid bar at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("timestamps not strictly increasing at row {row} ({prev} then {next})")]
    Ordering { row: usize, prev: i64, next: i64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no state available at bar {index}: {reason}")]
    StateUnavailable { index: usize, reason: String },

    #[error("bar {index} has no next close in its session")]
    SessionBoundary { index: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("replay buffer is full (capacity {capacity})")]
    BufferFull { capacity: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
