use thiserror::Error;

use crate::dynamics::Trajectory;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("trajectory diverged at t = {time}")]
    Diverged {
        time: f64,
        partial: Box<Trajectory>,
    },

    #[error("eigenvalue iteration did not converge")]
    NoConvergence,

    #[error("singular equation: {0}")]
    Singular(String),

    #[error("Riccati solver failed after {iterations} iterations (residual {residual:.3e}): {reason}")]
    CareFailure {
        reason: String,
        iterations: usize,
        residual: f64,
    },

    #[error("coefficient fit infeasible: snapshot {index} has nonzero residual {residual:.3e} with zero state and input")]
    Infeasible { index: usize, residual: f64 },

    #[error("data collection failed: trajectory {traj_id} diverged after resampling")]
    DataCollection { traj_id: usize },

    #[error("plant has no analytic optimal controller")]
    UnsupportedPlant,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dims(expected: usize, actual: usize, context: &'static str) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context,
        }
    }

    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::NoConvergence
                | Error::Singular(_)
                | Error::CareFailure { .. }
                | Error::Infeasible { .. }
                | Error::DataCollection { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
