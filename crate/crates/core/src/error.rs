use thiserror::Error;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Raised when the stored mass approaches the headroom constant `R`, so
    /// the birth normalization `(R - ||beta||)^-1` is no longer defined.
    #[error("mass headroom exhausted: {0}")]
    HeadroomExhausted(String),

    #[error("time step guard violated: {0}")]
    StepGuard(String),

    #[error("fixed-point iteration stopped after {iterations} iterations, last residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("lattice construction: {0}")]
    Lattice(String),

    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, BalanceError>;
