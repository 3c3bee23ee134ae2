use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid Dec-MDP: {0}")]
    InvalidMdp(String),

    #[error("instance too large for exact solves: {states} states x {joint_actions} joint actions (limit {max_states} x {max_joint_actions})")]
    TooLarge {
        states: usize,
        joint_actions: usize,
        max_states: usize,
        max_joint_actions: usize,
    },

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("marginal mismatch: joint policy marginal differs by {deviation:e} at state {state}, agent {agent}")]
    MarginalMismatch {
        state: usize,
        agent: usize,
        deviation: f64,
    },

    #[error("mdp hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("dataset record {index}: {reason}")]
    InconsistentRecord { index: usize, reason: String },

    #[error("dataset record {index} has no logged next action")]
    MissingNextAction { index: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("Q table range {range} exceeds the limit {limit} (gap {gap:e})")]
    RangeViolation { range: f64, limit: f64, gap: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
