//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClanError>;

#[derive(Debug, Error)]
pub enum ClanError {
    /// Shape or extent mismatch between tensors.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid operation parameters (stride, window, channel counts, ...).
    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },

    /// Config file parse error with the offending line number.
    #[error("{path}:{line}: {msg}")]
    ConfigParse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Bad input data (out-of-range label, out-of-range pixel value, ...).
    #[error("{op}: data error: {detail}")]
    Data { op: &'static str, detail: String },

    /// NaN or overflow encountered where finite values are required.
    #[error("{op}: numeric error: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// API misuse (non-scalar backward seed, empty dataset, unknown branch).
    #[error("{op}: usage error: {detail}")]
    Usage { op: &'static str, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ClanError {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        ClanError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(op: &'static str, detail: impl Into<String>) -> Self {
        ClanError::Config {
            op,
            detail: detail.into(),
        }
    }

    pub fn data(op: &'static str, detail: impl Into<String>) -> Self {
        ClanError::Data {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        ClanError::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn usage(op: &'static str, detail: impl Into<String>) -> Self {
        ClanError::Usage {
            op,
            detail: detail.into(),
        }
    }
}
