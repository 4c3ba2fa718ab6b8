use thiserror::Error;

/// Errors produced by the density, solver and filter layers.
#[derive(Debug, Error)]
pub enum GainError {
    #[error("invalid density model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("truncation too tight: grid holds mass {mass:.3e}, need at least {required:.3e}")]
    TruncationTooTight { mass: f64, required: f64 },

    #[error("density underflow at x = {x} (grid too wide)")]
    DensityUnderflow { x: f64 },

    #[error("underdetermined Galerkin system: {particles} particles for {basis} basis functions")]
    Underdetermined { particles: usize, basis: usize },

    #[error("Galerkin matrix singular (condition estimate {condition:.3e})")]
    SingularGalerkin { condition: f64 },

    #[error("fixed point not contracted after {iterations} iterations (final update norm {final_update_norm:.3e})")]
    NotContracted {
        iterations: usize,
        final_update_norm: f64,
    },

    #[error("extension out of support at x = {x:?}: all kernel weights underflow")]
    OutOfSupport { x: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("particle divergence: particle {index} became non-finite at step {step}")]
    ParticleDivergence { index: usize, step: usize },

    #[error("Riccati variance became negative at step {step} (dt too large)")]
    NegativeVariance { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GainError>;
