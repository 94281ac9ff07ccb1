use thiserror::Error;

use crate::transition_model::{ActionId, StateId};

#[derive(Debug, Error)]
pub enum Error {
    /// One `(state, action)` pair produced two different outcomes.
    #[error(
        "determinism violation at (state {state}, action {action}): recorded next={recorded_next} reward={recorded_reward}, observed next={observed_next} reward={observed_reward}"
    )]
    DeterminismViolation {
        state: StateId,
        action: ActionId,
        recorded_next: StateId,
        recorded_reward: f64,
        observed_next: StateId,
        observed_reward: f64,
    },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("action {action} is out of range for an environment with {action_count} actions")]
    InvalidAction {
        action: ActionId,
        action_count: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("state {state} is not an interior state of highway {highway}")]
    NotInterior { highway: u64, state: StateId },

    #[error("value maps have different key sets ({missing} keys missing, {extra} extra)")]
    KeyMismatch { missing: usize, extra: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
