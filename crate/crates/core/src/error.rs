use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A failure tied to a particular observation index (1-based).
    #[error("numerical failure at step {step}: {reason}")]
    NumericalAt { step: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at(step: usize, reason: impl Into<String>) -> Self {
        Error::NumericalAt { step, reason: reason.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numbers rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NumericalAt { .. })
    }
}
