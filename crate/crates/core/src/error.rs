//! Error taxonomy shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both offenders.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (bad field value, unknown variant, budget-free
    /// structural problems).
    #[error("config error: {0}")]
    Config(String),

    /// Bad data (empty split, out-of-range label, malformed instance).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse (backward on a non-scalar, unknown parameter name, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid artifact that does not fit the current model
    /// (fingerprint mismatch, wrong member list).
    #[error("compatibility error: {0}")]
    Compat(String),

    /// Work size exceeds the configured budget.
    #[error("budget error: {0}")]
    Budget(String),

    /// Gradient-check harness failure (not a tolerance miss: those are
    /// reported, not raised).
    #[error("gradient check error: {0}")]
    Check(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
