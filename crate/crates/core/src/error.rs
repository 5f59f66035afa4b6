use thiserror::Error;

/// Errors surfaced by the core numerics and model plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate rotation: quaternion norm {norm:.3e} below tolerance")]
    DegenerateRotation { norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical failure: {what} (condition estimate {cond:.3e})")]
    Numerical { what: String, cond: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: non-finite {term}")]
    Divergence { term: String, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
