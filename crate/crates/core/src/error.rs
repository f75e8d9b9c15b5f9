//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Error`]. The variants
//! double as the error categories the CLI maps to exit codes.

use std::path::PathBuf;

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An object is not in a state that permits the requested operation
    /// (e.g. a model bundle whose parts disagree).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Model fitting produced no usable result; the message suggests a
    /// parameter change.
    #[error("fit failed: {0}")]
    FitFailure(String),

    /// A file or directory could not be read or written.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// On-disk data exists but does not parse or fails validation.
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed { what: what.into(), detail: detail.into() }
    }
}
