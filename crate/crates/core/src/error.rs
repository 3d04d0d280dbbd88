use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: expected {expected}, got {got} ({what})")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("integration failure at t={time}: non-finite field at grid index {index}")]
    IntegrationFailure { time: f64, index: usize },

    #[error("convective activity A+Abar={value} <= 0 at grid index {index} (t={time})")]
    NonPositiveActivity { time: f64, index: usize, value: f64 },

    #[error("filter divergence at t={time}, member {member}, state index {index}")]
    FilterDivergence { time: f64, member: usize, index: usize },

    #[error("covariance error: {0}")]
    Covariance(String),

    #[error("observation calibration failed: {0}")]
    Calibration(String),

    #[error(
        "constrained solve failed after {iterations} iterations: energy violation {energy_violation:e}, \
         bound violation {bound_violation:e}"
    )]
    ConstrainedSolve {
        iterations: usize,
        energy_violation: f64,
        bound_violation: f64,
        best: Vec<f64>,
    },

    #[error("constrained analysis failed for members {members:?}: {first}")]
    EnsembleSolve { members: Vec<usize>, first: Box<Error> },

    #[error("training diverged for agent {agent} at epoch {epoch}, batch {batch}: non-finite loss")]
    Training { agent: usize, epoch: usize, batch: usize },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("normalizer has not been fitted")]
    UnfittedNormalizer,

    #[error("degenerate field: {0}")]
    DegenerateField(String),
}
