use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdaError {
    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("all regression weights are zero")]
    AllWeightsZero,

    #[error("invalid weight at row {row}: {value}")]
    InvalidWeight { row: usize, value: f64 },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("instrument specification: {0}")]
    Instruments(String),

    #[error("no residual degrees of freedom (n = {n_obs}, p = {n_params})")]
    NoDegreesOfFreedom { n_obs: usize, n_params: usize },

    #[error("fixed-effect absorption did not converge after {iterations} iterations (max group mean {residual_mean:e})")]
    AbsorptionDiverged {
        iterations: usize,
        residual_mean: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("orphan references: {0:?}")]
    Orphans(Vec<String>),

    #[error("subunit `{0}` has no win flag but the win-flag treatment basis was requested")]
    MissingWinFlag(String),

    #[error("running variable {r} lies outside the bandwidth {h}")]
    OutsideBandwidth { r: f64, h: f64 },

    #[error("too few observations on the {side} side of the cutoff: {count} (need at least {needed})")]
    TooFewObservations {
        side: &'static str,
        count: usize,
        needed: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("singular matrix in {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, RdaError>;
