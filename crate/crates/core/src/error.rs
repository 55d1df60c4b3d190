use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A caller passed an argument outside the operation's domain.
    #[error("usage error: {0}")]
    Usage(String),

    /// Array shapes of the inputs disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The objective or a parameter became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Every random start of a fit failed.
    #[error("all {starts} starts failed; last error: {last}")]
    AllStartsFailed { starts: usize, last: String },

    /// An internal invariant was violated.
    #[error("invariant breach: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn dimension(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
