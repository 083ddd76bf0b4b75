use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes
/// (config/usage -> 2, numeric -> 3, everything else -> 1).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An API was called outside its contract (wrong mode, wrong argument kind).
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value surfaced where the numeric contract forbids it.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Scene generation could not satisfy its constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
