use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    #[error("teacher construction: {0}")]
    Construction(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
