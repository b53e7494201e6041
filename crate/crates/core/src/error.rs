//! Error types shared across the crate.

use thiserror::Error;

/// All fallible operations in this crate return `CoreError`.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation's precondition (shape mismatch,
    /// out-of-range index, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of its allowed range or inconsistent
    /// with the rest of the run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value was produced while backpropagating through `op`.
    #[error("numeric error: non-finite gradient produced by op `{op}`")]
    Numeric { op: &'static str },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss={loss}, lr={lr}, grad_norm={grad_norm}")]
    Diverged {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    /// A binary or text artifact on disk does not match its declared layout.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        CoreError::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
