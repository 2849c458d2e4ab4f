use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: column `{column}` is not numeric: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("row {row}: treatment must be 0 or 1, got {value:?}")]
    NonBinaryTreatment { row: usize, value: String },

    #[error("mixed treatment within cluster `{0}`")]
    MixedTreatment(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("rank-deficient design; offending columns {0:?}")]
    RankDeficient(Vec<usize>),

    #[error("{rows} rows are not enough to fit {cols} columns")]
    TooFewRows { rows: usize, cols: usize },

    #[error("covariate index {index} out of range for {available} covariates")]
    CovariateIndex { index: usize, available: usize },

    #[error("standard error must be positive, got {0}")]
    NonPositiveStdError(f64),

    #[error("GEE did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("working covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("exchangeable correlation requires at least one cluster with two or more units")]
    AllSingleton,

    #[error("arm model too rich for correction factor (arm {arm}: n = {n}, p = {p})")]
    ArmTooRich { arm: u8, n: usize, p: usize },

    #[error("treatment arm {0} is empty")]
    EmptyArm(u8),

    #[error("degenerate score set: randomization variance is zero")]
    DegenerateScores,

    #[error("assignment has {found} treated units, expected {expected}")]
    AllocationMismatch { found: usize, expected: usize },

    #[error("assignment has length {found}, expected {expected}")]
    AssignmentLength { found: usize, expected: usize },

    #[error("number of permutations must be at least 1")]
    NoPermutations,

    #[error("exhaustive enumeration of {count} assignments exceeds the cap of {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("adjustment model contains the treatment column")]
    TreatmentInAdjustment,

    #[error("invalid selection spec: {0}")]
    InvalidSpec(String),

    #[error("cross-validation fold {fold} leaves {rows} training rows for {cols} forced columns")]
    FoldTooSmall {
        fold: usize,
        rows: usize,
        cols: usize,
    },

    #[error("unknown design `{name}`; available designs: {available}")]
    UnknownDesign { name: String, available: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cell `{cell}` failed on {failures} of {reps} replicates; first error: {first}")]
    CellFailures {
        cell: String,
        failures: usize,
        reps: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
