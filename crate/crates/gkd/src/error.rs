//! Error type shared across the crate.
//!
//! Every failure carries enough context to act on: the operation that
//! rejected its inputs, the first mismatched tensor name, the step at which
//! training diverged, and so on.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// An op was handed tensors whose shapes do not fit together.
    ShapeMismatch { op: &'static str, detail: String },
    /// A precondition on an argument failed (bad axis, non-positive
    /// temperature, invalid config field, ...).
    InvalidArgument { what: &'static str, detail: String },
    /// An op produced a NaN or infinity. Values are checked after every
    /// forward op and after backward, so the first offender is named.
    NonFinite { op: &'static str },
    /// Training aborted because the loss stopped being finite.
    Diverged { step: usize },
    /// Filesystem failure, with the path that caused it.
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but its contents are not what the format requires.
    Format { path: PathBuf, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            Error::InvalidArgument { what, detail } => {
                write!(f, "{what}: {detail}")
            }
            Error::NonFinite { op } => {
                write!(f, "{op}: produced a non-finite value")
            }
            Error::Diverged { step } => {
                write!(f, "training diverged at step {step}: loss is not finite")
            }
            Error::Io { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
            Error::Format { path, detail } => {
                write!(f, "{}: {detail}", path.display())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Error {
        Error::InvalidArgument { what, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Error {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
