//! Error type shared across the crate.
//!
//! Errors fall into two classes that the CLI maps onto exit codes:
//! contract violations (bad shapes, broken preconditions, non-finite
//! values) exit with 1, I/O and file-format problems exit with 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation.
    #[error("shape mismatch in `{op}`: {details}")]
    Shape { op: &'static str, details: String },

    /// A stated precondition or invariant was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where the contract requires finite ones.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// Malformed checkpoint, dataset, or config input.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Contract(_) | Error::NonFinite(_) => 1,
            Error::Format(_) | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
