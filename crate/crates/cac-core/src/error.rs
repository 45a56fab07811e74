//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacError {
    /// Invalid configuration or arguments, detected before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// Incompatible matrix or parameter shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed input data (CSV rows, labels, headers).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or diverging computations.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CacError {
    /// CLI process exit code: 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CacError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CacError>;
