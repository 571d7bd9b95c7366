use thiserror::Error;

/// Errors raised by the discretization, solvers and the scenario runner.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid region {name}: {reason}")]
    InvalidRegion { name: String, reason: String },

    #[error("geometry hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("singular step matrix at time step {step}")]
    SingularStep { step: usize },

    #[error("non-finite values produced at time step {step}")]
    NonFinite { step: usize },

    #[error(
        "coupled iteration does not contract (estimated factor {factor:.3e} after {iterations} \
         iterations); the follower penalty mu must be larger"
    )]
    NonContraction { iterations: usize, factor: f64 },

    #[error("Newton iteration failed at time step {step} after {iterations} iterations")]
    NewtonFailure { step: usize, iterations: usize },

    #[error("dense system with {unknowns} unknowns exceeds the cap of {cap}")]
    CapExceeded { unknowns: usize, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
