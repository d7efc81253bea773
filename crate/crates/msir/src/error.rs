//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("matrix is numerically zero; cannot form inverse square root")]
    ZeroMatrix,

    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },

    #[error("basis is rank deficient")]
    RankDeficient,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("requested {h} slices but response has only {distinct} distinct values")]
    TooManySlices { h: usize, distinct: usize },

    #[error("dimension d={d} out of range 1..={max}")]
    DimensionOutOfRange { d: usize, max: usize },

    #[error("invalid mixture configuration: {reason}")]
    InvalidMixture { reason: String },

    #[error("no feasible (K, parameterization) candidate for {n_obs} observations in {p} dimensions")]
    NoFeasibleModel { n_obs: usize, p: usize },

    #[error("fit requires n > p (got n={n}, p={p})")]
    TooFewObservations { n: usize, p: usize },

    #[error("invalid simulation specification: {reason}")]
    InvalidSimulation { reason: String },

    #[error("{0}")]
    InvalidOptions(String),

    #[error("column {column:?} not found in header")]
    MissingColumn { column: String },

    #[error("non-numeric predictor value {value:?} at row {row}, column {column:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("fit document: {0}")]
    FitDocument(String),
}

impl Error {
    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to numerical failures inside the estimators.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::TooFewRows { .. }
                | Error::NonFinite { .. }
                | Error::TooManySlices { .. }
                | Error::DimensionMismatch { .. }
                | Error::TooFewObservations { .. }
                | Error::MissingColumn { .. }
                | Error::NonNumericCell { .. }
                | Error::Csv(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::FitDocument(_)
                | Error::InvalidOptions(_)
                | Error::InvalidSimulation { .. }
        )
    }
}
