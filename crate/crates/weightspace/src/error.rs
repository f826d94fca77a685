//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or corrupted on-disk artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Missing or inconsistent data in a zoo or manifest.
    #[error("data error: {0}")]
    Data(String),

    /// Token position exceeds the position-embedder capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Training produced a non-finite loss.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
