//! Error type shared by the analysis pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("schedules are defined on different time grids")]
    GridMismatch,

    #[error("time {t} lies outside the schedule span [{lo}, {hi}]")]
    OutOfSpan { t: f64, lo: f64, hi: f64 },

    #[error("R(t) is not negative definite at t = {t} (max eigenvalue {max_eig:.3e})")]
    RNotNegativeDefinite { t: f64, max_eig: f64 },

    #[error("indefinite weight: {0}")]
    IndefiniteWeight(String),

    #[error("non-finite value in {context} at t = {t}")]
    NonFinite { context: &'static str, t: f64 },

    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudget { t: f64, max_steps: usize },

    #[error("nominal simulation diverged at t = {t}")]
    SimulationDiverged { t: f64 },

    #[error("solution escaped within the first accepted step from the horizon (t = {t})")]
    EscapeAtHorizon { t: f64 },

    #[error("degenerate escape probe at t = {t}: spectral radius {rho:.3e} too small")]
    DegenerateProbe { t: f64, rho: f64 },

    #[error("cut vector is numerically zero (norm {norm:.3e})")]
    ZeroCut { norm: f64 },

    #[error("ellipsoid shape matrix degenerate at iteration {iter} (min eigenvalue {min_eig:.3e})")]
    ShapeDegenerate { iter: usize, min_eig: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
