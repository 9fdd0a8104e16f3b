//! Error type shared by every module in the toolkit.

use std::path::PathBuf;

/// Unified error type for archive I/O, quantization, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file does not conform to the `.lqta` or `.lqnm` layout.
    #[error("format error: {0}")]
    Format(String),

    /// Numeric payload is unusable (NaN/Inf where finite values are required).
    #[error("data error: {0}")]
    Data(String),

    /// A value or structure violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A tensor admits no positive scale (e.g. all elements are zero).
    #[error("degenerate tensor '{name}': {reason}")]
    Degenerate { name: String, reason: String },

    /// The exact accumulator cannot hold the requested reduction.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// The training loop produced a non-finite loss.
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Underlying I/O failure, annotated with the path when known.
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn degenerate(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Degenerate { name: name.into(), reason: reason.into() }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
