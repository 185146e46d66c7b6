use thiserror::Error;

/// Errors produced by the quadmix pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncation { expected: u64, actual: u64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("category error: {0}")]
    Category(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
