use thiserror::Error;

/// Errors produced by model evaluation, fitting, aggregation and the wire
/// format.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(
        "matrix not positive definite in {context}: Cholesky failed at pivot {pivot}, \
         Gershgorin eigenvalue lower bound {eigen_bound:.6e}"
    )]
    NotPositiveDefinite {
        context: String,
        pivot: usize,
        eigen_bound: f64,
    },

    #[error("matrix not symmetric in {context}: |a[{i},{j}] - a[{j},{i}]| = {delta:.3e}")]
    NotSymmetric {
        context: String,
        i: usize,
        j: usize,
        delta: f64,
    },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported schema version {found} (supported: {supported})")]
    UnsupportedSchema { found: u32, supported: u32 },

    #[error("incompatible local fits:\n{}", .0.join("\n"))]
    Incompatible(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;
