use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (last relative step {last_step:.3e}); plant is not stabilizable")]
    NotStabilizable { iterations: usize, last_step: f64 },

    #[error("estimated model is not stabilizable: {0}")]
    EstimateNotStabilizable(Box<Error>),

    #[error("Q^uu block is singular to working precision")]
    SingularQuu,

    #[error("correlation matrix is ill-conditioned (condition estimate {0:.3e})")]
    IllConditioned(f64),

    #[error("hypothesis violated: {what} (margin {margin:.3e})")]
    HypothesisViolated { what: String, margin: f64 },

    #[error("iteration did not converge after {0} iterations")]
    NotConverged(usize),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
