//! Evaluation harness: per-session metrics, condition comparisons, report
//! generation and a seeded session simulator.

mod annotations;
mod compare;
mod metrics;
mod report;
mod simulate;

pub use annotations::Annotations;
pub use compare::{
    compare_conditions, default_spec, describe_improvement, improvement, CompareConfig, ComparisonRow,
    Estimate, Improvement, ModelKind,
};
pub use metrics::{
    capture_components, compute_metric, compute_metrics, information_intervals, km_time, response_latencies,
    time_to_action, CaptureComponents, ConditionSummary, MetricConfig, MetricFailure, MetricId, MetricKind,
    MetricResult, MetricSet, MetricValue, Profile, Unit,
};
pub use report::{generate_report, EnaSummary, Report, ReportInputs, SurveyRow};
pub use simulate::{simulate_sessions, Effects, Noise, Scenario, Simulation, SimulationTruth, StepSpec, TaskKind, TaskSpec};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("missing {kind} annotation for session {session}")]
    MissingAnnotation { kind: String, session: String },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("need data for two conditions, found {0:?}")]
    TooFewConditions(Vec<String>),
    #[error("report has no rows")]
    EmptyReport,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("annotation table: {0}")]
    Table(String),
}
