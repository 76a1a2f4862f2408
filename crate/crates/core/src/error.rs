use thiserror::Error;

/// Errors surfaced by every layer of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a precondition (shape mismatch, stale trace, empty batch).
    #[error("usage error: {0}")]
    Usage(String),
    /// A value became NaN or infinite, or a numeric guard tripped.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed checkpoint, dataset, or config file.
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
