//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model, policy, or argument failed structural validation.
    #[error("validation failed: {0}")]
    Invalid(String),

    /// Two arguments disagree on a dimension.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A linear system has no usable solution.
    #[error("singular system in {context}: {detail}")]
    Singular {
        context: &'static str,
        detail: String,
    },

    /// An exhaustive enumeration would exceed its size guard.
    #[error("enumeration of {size:.3e} items exceeds the limit of {limit:.3e}")]
    TooLarge { size: f64, limit: f64 },

    /// Text deserialization failed. The message names the offending key.
    #[error("parse error (line {line}): {message}")]
    Parse { line: usize, message: String },

    /// A run or experiment configuration is unusable.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
