//! Crate-wide error type.

use std::fmt;

/// Errors produced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// An argument violates a precondition.
    InvalidArgument(String),
    /// An index is outside the addressed tensor.
    OutOfBounds {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Calibration activations are missing for a layer.
    MissingCalibration { layer: usize },
    /// A container file is structurally invalid. Offsets are byte positions.
    Container { offset: u64, message: String },
    /// A configuration document failed schema validation.
    Config(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { op, expected, got } => {
                write!(f, "{op}: dimension mismatch (expected {expected}, got {got})")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::OutOfBounds { what, index, bound } => {
                write!(f, "{what} index {index} out of bounds (len {bound})")
            }
            Error::MissingCalibration { layer } => {
                write!(f, "missing calibration activations for layer {layer}")
            }
            Error::Container { offset, message } => {
                write!(f, "container error at byte {offset}: {message}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
