use thiserror::Error;

/// Errors raised by the sparse linear model toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlmError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operand dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed input data (ragged matrices, bad files, bad config values).
    #[error("format error: {0}")]
    Format(String),

    /// The requested operation is not defined for this input kind.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A scalar root/minimum search ran out of iterations.
    #[error("iteration limit reached after {iterations} iterations (bracket [{lo:e}, {hi:e}])")]
    IterationLimit { iterations: usize, lo: f64, hi: f64 },

    /// NaN or infinity showed up inside an iterative method.
    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    /// Dense factorization failed (matrix not positive definite).
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// Newton line search could not find a decrease; carries the last iterate.
    #[error("line search stalled after {steps} backtracking steps (objective {objective:e})")]
    LineSearchStall {
        steps: usize,
        objective: f64,
        iterate: Vec<f64>,
    },

    /// A property guaranteed by the theory was violated numerically.
    #[error("consistency violation: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, SlmError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(SlmError::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(SlmError::Shape(msg.into()))
}
