//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Array or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A scalar argument is outside its legal range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity reached a public operation.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Run or domain configuration problem (bad key, missing field, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// A data, checkpoint, or log file is malformed or inconsistent.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to
    /// (1 = usage/config, 2 = data/checkpoint/compute).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
