use std::io;

use thiserror::Error;

/// Errors produced by the quantizer, trainer, index and file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical precondition (dimension mismatch,
    /// non-finite value, index out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration is inconsistent, e.g. feature refinement requested
    /// without labels.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file is malformed or failed its checksum.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
