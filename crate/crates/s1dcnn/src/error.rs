//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector dimensions do not match the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input too short or empty where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Model configuration violates an invariant (e.g. lookahead >= memory).
    #[error("invalid config: {0}")]
    Config(String),

    /// Data fails a semantic check (labels out of range, bad manifest line, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file (model, feature dump, WAV) is malformed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A stateful object was driven through an illegal transition.
    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
