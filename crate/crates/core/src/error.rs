use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("distribution does not sum to 1 (sum = {0})")]
    NotADistribution(f64),

    #[error("support of size {0} exceeds the exact solver limit of 64")]
    SupportTooLarge(usize),

    #[error("invalid id: {kind} {id} (limit {limit})")]
    InvalidId {
        kind: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e}); check the discount factor")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("augmented state space of {0} states exceeds the enumeration budget")]
    EnumerationBudget(u128),

    #[error("belief supports leave states uncovered: {uncovered:?}")]
    RankDeficient { uncovered: Vec<usize> },

    #[error("empty support")]
    EmptySupport,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("nothing to verify")]
    NothingToVerify,

    #[error("window of length {got} exceeds the configured maximum delay {max}")]
    WindowTooLong { got: usize, max: usize },

    #[error("non-finite loss at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("degenerate normalization: expert score {expert} <= random score {random}")]
    DegenerateNormalization { expert: f64, random: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
