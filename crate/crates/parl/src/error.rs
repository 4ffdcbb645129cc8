use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory support has {estimate} sequences, above the explicit-enumeration cap of {max}")]
    SupportTooLarge { estimate: u128, max: u64 },

    #[error("horizon must be a positive number of steps")]
    InvalidHorizon,

    #[error("{what} index {index} out of range (must be < {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{what} is not a probability distribution: {detail}")]
    InvalidDistribution { what: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite parameter produced ({context}); step size likely divergent")]
    NonFiniteParameter { context: String },

    #[error("lower-level solve did not converge: gradient norm {grad_norm:.3e} after {iterations} iterations")]
    NotConverged { grad_norm: f64, iterations: usize },

    #[error("value Hessian is singular (rank 0) and the right-hand side is nonzero")]
    SingularHessian,

    #[error("preference batch is empty")]
    DegenerateBatch,

    #[error("run trace is empty")]
    EmptyTrace,

    #[error("non-finite function evaluation on the finite-difference stencil (coordinate {coordinate})")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("CSV schema mismatch: missing or malformed column `{column}`")]
    SchemaMismatch { column: String },

    /// A driver run aborted on a non-finite parameter; the partial trace is attached.
    #[error("run aborted at iteration {at_iteration}: non-finite parameter; partial trace attached")]
    AbortedRun {
        at_iteration: usize,
        partial: Box<crate::driver::RunTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
