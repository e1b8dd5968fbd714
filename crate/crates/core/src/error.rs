use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation needs.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared while strict mode was enabled.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file did not match the expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    /// A file parsed but its content breaks an invariant.
    #[error("data error at record {index}: {detail}")]
    Data { index: u64, detail: String },

    /// Unknown or malformed configuration entry.
    #[error("config error for key `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// Checkpoint cannot be used with the requested configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }

    /// True for failures caused by files or the filesystem rather than by
    /// the caller's arguments.
    pub fn is_io_or_format(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_) | Error::Data { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
