use thiserror::Error;

/// Failure modes of the reduction pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhError {
    #[error("structural error in {matrix}: {detail}")]
    Structural { matrix: String, detail: String },

    #[error("non-finite evaluation: {detail} (state norm {state_norm:e})")]
    Evaluation {
        detail: String,
        state_norm: f64,
        state: Vec<f64>,
    },

    #[error("Newton iteration did not converge at t = {t:e} after {iterations} iterations (last update {last_update:e})")]
    NewtonFailure {
        t: f64,
        iterations: usize,
        last_update: f64,
    },

    #[error("integration diverged at t = {t:e}")]
    Divergence { t: f64 },

    #[error("rank error in {what}: requested {requested}, numerical rank {available}; use r <= {available}")]
    Rank {
        what: String,
        requested: usize,
        available: usize,
    },

    #[error("test and trial subspaces are nearly orthogonal: sigma_min(W^T V) = {sigma_min:e}, cond = {cond:e}")]
    GenericOrientation { sigma_min: f64, cond: f64 },

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    #[error("linearization failed: {0}")]
    Linearization(String),

    #[error("transfer function evaluated at a pole s = {re:e} + {im:e}i")]
    Pole { re: f64, im: f64 },

    #[error("shift {index} collides with the spectrum of the linear model")]
    ShiftCollision { index: usize },

    #[error("interpolation directions are degenerate: {0}")]
    DegenerateDirections(String),

    #[error("DEIM selection failed at step {step}: {detail}")]
    DeimSelection { step: usize, detail: String },

    #[error("DEIM interpolation matrix too ill-conditioned: cond = {cond:e}")]
    DeimConditioning { cond: f64 },

    #[error("trajectories are on different time grids: {0}")]
    GridMismatch(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, PhError>;
