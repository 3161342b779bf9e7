//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by tensor ops, data handling, training and evaluation.
#[derive(Debug)]
pub enum Error {
    /// An op was applied to tensors with incompatible shapes. Carries the op
    /// name and a description of the offending dimensions.
    Shape { op: &'static str, detail: String },
    /// Numeric-domain violation (log of non-positive values, zero-norm rows,
    /// non-positive temperature, out-of-range weights).
    Domain(String),
    /// Invalid configuration or arguments (unknown arch, bad schedule index,
    /// unknown config key, conflicting settings).
    Config(String),
    /// Malformed input data (dataset files, checkpoint files).
    Format(String),
    /// A failure during a run, e.g. a non-finite loss at a given step.
    Runtime(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in `{op}`: {detail}"),
            Error::Domain(msg) => write!(f, "numeric domain error: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Runtime(msg) => write!(f, "runtime error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by user input (config, flags, file formats)
    /// as opposed to failures while a run is executing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Format(_) | Error::Shape { .. } | Error::Domain(_)
        )
    }
}
