//! Regression models and survey scoring used by the evaluations.

mod design;
mod lmm;
mod logistic;
mod survey;

pub use design::{Design, Observation, RegressionSpec, Term, CONDITION, OUTCOME, START, TASK};
pub use lmm::{
    fit_lmm, fit_lmm_with, profile_log_likelihood, LmmFit, LmmOptions, GRID_POINTS, LOG_LAMBDA_MAX,
    LOG_LAMBDA_MIN,
};
pub use logistic::{fit_logistic, LogisticFit};
pub use survey::{
    default_km_sus_groups, parse_survey_table, score_km_sus, score_sus, score_tlx, tlx_boxplot_table,
    DimensionSummary, Instrument, KmSusScore, Practice, SurveyResponse, TlxSummary, TLX_DIMENSIONS,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("design matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficientDesign { rank: usize, columns: usize },
    #[error("variance-ratio search did not converge")]
    NonConvergence,
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("need more observations ({n}) than regressors ({p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("observation {index} lacks factor {factor:?}")]
    MissingFactor { index: usize, factor: String },
    #[error("observation {0} has no grouping label")]
    MissingGroup(usize),
    #[error("outcome has a single class")]
    SingleClassOutcome,
    #[error("complete separation: a coefficient exceeded the bound")]
    CompleteSeparation,
    #[error("expected {expected} items, got {got}")]
    WrongItemCount { expected: usize, got: usize },
    #[error("item {item} value {value} outside [{lo}, {hi}]")]
    OutOfRange { item: usize, value: i64, lo: i64, hi: i64 },
    #[error("item group map is incomplete: {0}")]
    IncompleteGroupMap(String),
    #[error("no responses")]
    EmptyInput,
    #[error("survey table: {0}")]
    Table(String),
}

/// Two-sided p value from the standard normal.
pub(crate) fn normal_p(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::standard();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

pub const Z_95: f64 = 1.96;
