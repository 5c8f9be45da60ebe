//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-side contract was violated (bad argument, wrong call order).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric failure (NaN/inf, divergence) that aborts the computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A binary file did not parse; reports where it went wrong.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 1 verification, 2 usage/config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Format { .. } => 2,
            _ => 2,
        }
    }
}
