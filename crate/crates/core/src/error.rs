//! Error type shared by every module in the crate.

use thiserror::Error;

/// All fallible operations in this crate return `Result<T, SegError>`.
#[derive(Debug, Error)]
pub enum SegError {
    /// Tensor dims do not line up. Carries both dim tuples so the message
    /// is actionable without a debugger.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Shape {
        context: String,
        lhs: [usize; 4],
        rhs: [usize; 4],
    },

    /// Invalid configuration (bad field value, unknown layer name, missing
    /// checkpoint for a transfer variant, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset file failed validation (label out of range, dim mismatch).
    #[error("data error: {0}")]
    Data(String),

    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk payload (PNM header, checkpoint, manifest).
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A checkpoint or flat vector whose layout disagrees with its payload.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// Non-finite loss or gradient encountered during optimization.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A forward trace was consumed after the network it came from changed.
    #[error("invariant violation: {0}")]
    StaleTrace(String),
}

impl SegError {
    pub fn shape(context: impl Into<String>, lhs: [usize; 4], rhs: [usize; 4]) -> Self {
        SegError::Shape {
            context: context.into(),
            lhs,
            rhs,
        }
    }
}

pub type Result<T> = std::result::Result<T, SegError>;
