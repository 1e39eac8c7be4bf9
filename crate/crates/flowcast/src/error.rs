//! Error type shared across the library.

use std::fmt;

/// Library-wide error enum. Variants map onto the CLI exit-code convention:
/// `Config` is a usage problem, `Data` an input problem, everything else a
/// numeric/internal failure.
#[derive(Debug)]
pub enum Error {
    /// Tensor or matrix shape mismatch; message names both shapes.
    Shape(String),
    /// Mathematical domain violation (log of non-positive input, quantile
    /// level outside (0,1), negative spline discriminant, ...).
    Domain(String),
    /// Invalid configuration or arguments.
    Config(String),
    /// Malformed or inconsistent input data.
    Data(String),
    /// Numeric failure during computation (NaN loss, non-finite values).
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
