use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TlabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at step {step}: loss {loss:e} exceeds {limit:e} (initial loss {initial:e})")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        limit: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, TlabError>;

pub(crate) fn invalid(msg: impl Into<String>) -> TlabError {
    TlabError::InvalidArgument(msg.into())
}
