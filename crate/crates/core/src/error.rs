use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("linear solve did not converge: residual {residual:.3e} after {iters} iterations")]
    SolverDiverged { residual: f64, iters: usize },

    #[error("time step underflow: required dt {dt:.3e} yr below floor {floor:.3e} yr")]
    TimeStepUnderflow { dt: f64, floor: f64 },

    #[error("observation schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("forward model failed {failures} times, above threshold {threshold}")]
    ForwardFailures { failures: usize, threshold: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
