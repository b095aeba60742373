use thiserror::Error;

/// Errors produced by the factorization library.
#[derive(Debug, Error)]
pub enum NsfError {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("degenerate observation {index}: {reason}")]
    DegenerateObservation { index: usize, reason: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate component {0}: all entries are zero")]
    DegenerateComponent(usize),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("optimization diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NsfError>;
