use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported sphere dimension {got}: {context}")]
    UnsupportedDimension { got: usize, context: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fibonacci lattice needs at least one point")]
    EmptyLattice,

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("argument {value} outside the domain of {function}")]
    Domain { function: &'static str, value: f64 },

    #[error("index range {start}..{end} exceeds {len} available entries")]
    Index { start: usize, end: usize, len: usize },

    #[error("vector is not a unit vector (norm {0})")]
    NotUnit(f64),

    #[error("cannot embed the zero vector")]
    ZeroVector,

    #[error("cholesky factorisation failed ({context}) even with jitter {jitter:e}")]
    Cholesky { context: &'static str, jitter: f64 },

    #[error("covariance has eigenvalue {0:e} below the admissible negative floor")]
    NegativeCovariance(f64),

    #[error("coordinate frame is singular within {0:e} of a pole")]
    PoleSingularity(f64),

    #[error("prior has no explicit feature expansion and cannot be sampled as a function")]
    NotSampleable,

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
