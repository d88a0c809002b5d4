//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by schedule construction, the temporal operators, the
/// reference denoiser and the training/sampling drivers.
#[derive(Debug, Error)]
pub enum DyDiffError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("gamma_bar must lie in (0, 1], got {0}")]
    GammaBarOutOfRange(f64),

    #[error("gamma_bar {value} is below the inversion floor {floor} (error growth ~ 1/sqrt(gamma_bar) per state)")]
    GammaBarBelowFloor { value: f64, floor: f64 },

    #[error("state sequence must be nonempty")]
    EmptySequence,

    #[error("timestep {t} out of range 0..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("index ranges are not contiguous: {0}")]
    NonContiguous(String),

    #[error("non-finite value in {layer}{}", batch_index.map(|i| format!(" (batch item {i})")).unwrap_or_default())]
    NumericFailure {
        layer: String,
        batch_index: Option<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DyDiffError>;
