use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("simplex vectors need at least 2 coordinates, got {0}")]
    TooFewCoordinates(usize),

    #[error("entry {index} = {value} is not a probability")]
    InvalidProbability { index: usize, value: f64 },

    #[error("entries sum to {sum}, which is too far from 1 to renormalise")]
    NotNormalised { sum: f64 },

    #[error("invalid loss vector: {0}")]
    InvalidLoss(String),

    #[error("exact constant needs {count} compositions, above the limit of {limit}")]
    InfeasibleEnumeration { count: f64, limit: f64 },

    #[error("Stirling constant requires m >= M (got m = {m}, M = {types})")]
    StirlingDomain { m: u64, types: usize },

    #[error("risk vector has zero coordinate {index}; the kl-inverse needs an interior point")]
    BoundaryRisk { index: usize },

    #[error("mu = {mu} lies outside (-inf, {upper})")]
    OutsideDomain { mu: f64, upper: f64 },

    #[error("root bracket for c = {c} not found within {iterations} doublings")]
    NoBracket { c: f64, iterations: u32 },

    #[error("root finder stalled with residual {residual} > tolerance {tol}")]
    NotConverged { residual: f64, tol: f64 },

    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
