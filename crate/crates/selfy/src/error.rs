//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Incompatible or invalid tensor shapes for an operation.
    Shape(String),
    /// Requested allocation overflows usize.
    Size(String),
    /// Axis index outside a tensor's rank.
    Axis { axis: usize, rank: usize },
    /// Scalar argument outside its domain (e.g. non-positive temperature).
    Domain(String),
    /// Invalid layer / block / experiment configuration.
    Config(String),
    /// Malformed `.vten` or checkpoint data.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Size(msg) => write!(f, "size error: {msg}"),
            Error::Axis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank-{rank} tensor")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
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
