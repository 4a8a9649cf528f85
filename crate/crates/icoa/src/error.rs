use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum IcoaError {
    /// A configuration or argument value violates a documented precondition.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// An input point lies outside the generator rule's declared support.
    #[error("input outside the rule's support: {0}")]
    OutOfSupport(String),

    /// A covariance entry was asked to use fewer than two samples.
    #[error("covariance entry ({i},{j}) has {got} samples, need at least 2")]
    InsufficientSamples { i: usize, j: usize, got: usize },

    /// Covariance matrix stayed numerically singular after the jitter policy.
    #[error("covariance matrix is singular (condition estimate {condition:.3e} exceeds 1e12 after jitter)")]
    SingularCovariance { condition: f64 },

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Dataset parsing failed.
    #[error("dataset parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IcoaError>;
