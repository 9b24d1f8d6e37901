use thiserror::Error;

use crate::atpmodel::LossBreakdown;
use crate::planner::PlanResult;

/// Errors raised by the ATP library.
#[derive(Debug, Error)]
pub enum AtpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular matrix in {0}; retry with damping > 0")]
    Singular(&'static str),
    #[error("goal {goal:?} is unreachable (distance {distance:.4} m exceeds reach {reach:.4} m)")]
    Unreachable {
        goal: Vec<f64>,
        distance: f64,
        reach: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}: {breakdown}")]
    Diverged {
        epoch: usize,
        breakdown: LossBreakdown,
    },
    #[error("projection did not converge (best error {:.3e} m)", .0.err_after_m)]
    NotConverged(Box<PlanResult>),
    #[error("model format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AtpError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(AtpError::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
