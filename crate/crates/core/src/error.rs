//! Crate-wide error type.
//!
//! The variants map onto the failure classes the engine distinguishes:
//! shape mismatches, contract violations (misuse of an API), precondition
//! failures on inputs, configuration problems, numeric failures (NaN),
//! and parse errors for the on-disk formats.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. non-scalar loss, dangling node id).
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation precondition on the input data failed.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// A run configuration is invalid; the message names the failed rule.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric failure (NaN/Inf) surfaced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file could not be parsed; the location pinpoints the failure.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
