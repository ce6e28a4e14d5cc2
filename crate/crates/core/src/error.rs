use thiserror::Error;

/// Errors shared by every module of the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index out of range: {what} = {index}, limit {limit}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid variant: {0}")]
    InvalidVariant(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds inference cap {cap}")]
    CapExceeded { len: usize, cap: usize },

    #[error("training diverged at step {step}: loss {loss} vs initial {initial}")]
    TrainingDiverged { step: usize, loss: f64, initial: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("length too small: {0}")]
    TooShort(String),

    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
