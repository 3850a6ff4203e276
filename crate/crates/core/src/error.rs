use thiserror::Error;

use crate::safeset::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("linearization failed: {0}")]
    Linearization(String),
    #[error("trajectory rejected: {0}")]
    Rejected(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("controller failure at step {step}: {reason}")]
    ControllerFailure { step: usize, reason: String },
    /// The closed loop did not reach the target; the partial trajectory is kept for diagnosis.
    #[error("iteration failed after {} steps: {reason}", .trajectory.len())]
    IterationFailure {
        reason: String,
        trajectory: Box<Trajectory>,
    },
    #[error("baseline policy is infeasible: {0}")]
    BaselineInfeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
