use thiserror::Error;

/// Error type shared across the crate.
///
/// Programmer errors (shape mismatches inside the tape, dtype confusion)
/// panic with a descriptive message instead; this enum covers conditions a
/// caller can hit with well-formed code: bad configs, bad data, numeric
/// blow-ups in checked mode.
#[derive(Debug, Error)]
pub enum FdmError {
    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {context} at position {position}")]
    NonFinite { context: String, position: usize },

    #[error("non-finite gradient for parameter `{param}`; step rejected")]
    NonFiniteGrad { param: String },

    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("cache update at position {got}, expected {expected}")]
    PositionMismatch { expected: usize, got: usize },

    #[error("function is not deterministic: {context}")]
    NonDeterministic { context: String },

    #[error("infeasible task sizes: {0}")]
    Infeasible(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FdmError>;
