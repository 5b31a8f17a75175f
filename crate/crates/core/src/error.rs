use alloc::string::String;

/// Errors produced by the inpainting core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate hole: {0}")]
    DegenerateHole(String),
    #[error("placement failed after {tries} attempts: {reason}")]
    Placement { tries: usize, reason: String },
    #[error("search space empty: {0}")]
    EmptySearch(String),
    #[error("incompatible parameters: {0}")]
    Incompatible(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
