use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{ConditionSummary, MetricId, MetricKind, MetricResult, MetricSet, Profile};
use super::EvalError;
use crate::stats::{fit_lmm, fit_logistic, Observation, RegressionSpec, CONDITION, OUTCOME, START, TASK};
use crate::trace::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub treatment: String,
    pub baseline: String,
    /// Replaces the default model for a metric.
    #[serde(default)]
    pub overrides: BTreeMap<MetricId, RegressionSpec>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            treatment: "goldmind".into(),
            baseline: "baseline".into(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MixedEffects,
    Logistic,
}

/// Coefficient of the treatment indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub column: String,
    pub beta: f64,
    pub se: f64,
    /// `t` for mixed models, `z` for logistic fits.
    pub stat_name: String,
    pub stat: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// Signed so that positive always means the treatment did better.
    pub percent: Option<f64>,
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: MetricId,
    pub treatment: ConditionSummary,
    pub baseline: ConditionSummary,
    pub model: ModelKind,
    /// Human-readable model formula.
    pub formula: String,
    pub estimate: Option<Estimate>,
    pub unfit: Option<String>,
    pub improvement: Improvement,
    pub warnings: Vec<String>,
}

/// Rounds to whole percent and attaches the metric's wording.
pub fn describe_improvement(percent: f64, good: &str, bad: &str) -> String {
    let r = percent.round();
    if r >= 0.0 {
        format!("{}% {good}", r as i64)
    } else {
        format!("{}% {bad}", (-r) as i64)
    }
}

/// Relative change against the baseline mean, oriented by the metric's direction.
pub fn improvement(metric: MetricId, treatment_mean: f64, baseline_mean: f64) -> Improvement {
    if baseline_mean == 0.0 || !baseline_mean.is_finite() || !treatment_mean.is_finite() {
        let descriptor = if treatment_mean == baseline_mean { "no change" } else { "n/a" };
        return Improvement {
            percent: None,
            descriptor: descriptor.into(),
        };
    }
    let rel = (baseline_mean - treatment_mean) / baseline_mean.abs();
    let percent = 100.0 * if metric.lower_is_better() { rel } else { -rel };
    let (good, bad) = metric.phrases();
    Improvement {
        percent: Some(percent),
        descriptor: describe_improvement(percent, good, bad),
    }
}

/// Default model per metric and profile: logistic for binary outcomes;
/// otherwise a random-intercept model with condition, plus task in the
/// second round and the order/task interactions for third-round quality.
pub fn default_spec(profile: Profile, metric: MetricId) -> RegressionSpec {
    let y = metric.as_str();
    if metric.kind() == MetricKind::Binary {
        return RegressionSpec::logistic_condition(y);
    }
    match (profile, metric) {
        (Profile::Iter2, _) => RegressionSpec::condition_task(y),
        (Profile::Iter3, MetricId::CompletionQuality) => RegressionSpec::condition_order_task_interactions(y),
        _ => RegressionSpec::condition_only(y),
    }
}

fn formula(spec: &RegressionSpec, kind: ModelKind) -> String {
    use crate::stats::Term;
    let terms: Vec<String> = spec
        .terms
        .iter()
        .map(|t| match t {
            Term::Main(f) => f.clone(),
            Term::Interaction(a, b) => format!("{a}:{b}"),
        })
        .collect();
    let mut rhs = terms.join(" + ");
    if let Some(g) = &spec.random_intercept {
        rhs.push_str(&format!(" + (1|{g})"));
    }
    match kind {
        ModelKind::Logistic => format!("logit({}) ~ {rhs}", spec.outcome),
        ModelKind::MixedEffects => format!("{} ~ {rhs}", spec.outcome),
    }
}

fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::Pass => "pass",
        Outcome::Fail => "fail",
        Outcome::Unknown => "unknown",
    }
}

fn observations(r: &MetricResult, cfg: &CompareConfig) -> Vec<Observation> {
    r.values
        .iter()
        .filter(|v| v.condition == cfg.treatment || v.condition == cfg.baseline)
        .map(|v| {
            Observation::new(
                v.value,
                &v.participant,
                &[
                    (CONDITION, v.condition.as_str()),
                    (TASK, v.task.as_str()),
                    (START, v.start.as_str()),
                    (OUTCOME, outcome_label(v.outcome)),
                ],
            )
        })
        .collect()
}

fn fit_row(r: &MetricResult, profile: Profile, cfg: &CompareConfig) -> ComparisonRow {
    let t = ConditionSummary::of(&cfg.treatment, &r.values_for(&cfg.treatment));
    let b = ConditionSummary::of(&cfg.baseline, &r.values_for(&cfg.baseline));
    let improvement = improvement(r.metric, t.mean, b.mean);
    let spec = cfg
        .overrides
        .get(&r.metric)
        .cloned()
        .unwrap_or_else(|| default_spec(profile, r.metric))
        .with_reference(CONDITION, &cfg.baseline);
    let model = if spec.random_intercept.is_none() {
        ModelKind::Logistic
    } else {
        ModelKind::MixedEffects
    };
    let mut row = ComparisonRow {
        metric: r.metric,
        formula: formula(&spec, model),
        treatment: t,
        baseline: b,
        model,
        estimate: None,
        unfit: None,
        improvement,
        warnings: Vec::new(),
    };
    let empty = [&row.treatment, &row.baseline].into_iter().find(|s| s.n == 0).map(|s| s.condition.clone());
    if let Some(c) = empty {
        row.unfit = Some(format!("no data for {c}"));
        return row;
    }
    let data = observations(r, cfg);
    let column = format!("{CONDITION}[{}]", cfg.treatment);
    let fitted = match model {
        ModelKind::Logistic => fit_logistic(&spec, &data).map(|f| {
            let j = f.coef(&column);
            (j.map(|j| (f.beta[j], f.se[j], f.z[j], f.p[j], f.ci_low[j], f.ci_high[j])), "z", Vec::new())
        }),
        ModelKind::MixedEffects => fit_lmm(&spec, &data).map(|f| {
            let j = f.coef(&column);
            let mut w = f.warnings.clone();
            w.push(format!("p values by {}", f.df_method));
            (j.map(|j| (f.beta[j], f.se[j], f.t[j], f.p[j], f.ci_low[j], f.ci_high[j])), "t", w)
        }),
    };
    match fitted {
        Ok((Some((beta, se, stat, p, lo, hi)), stat_name, warnings)) => {
            row.estimate = Some(Estimate {
                column,
                beta,
                se,
                stat_name: stat_name.into(),
                stat,
                p,
                ci_low: lo,
                ci_high: hi,
            });
            row.warnings = warnings;
        }
        Ok((None, _, _)) => row.unfit = Some(format!("no {column} column")),
        Err(e) => row.unfit = Some(e.to_string()),
    }
    row
}

/// One row per computed metric; a model failure marks its row unfit.
pub fn compare_conditions(m: &MetricSet, cfg: &CompareConfig) -> Result<Vec<ComparisonRow>, EvalError> {
    let mut seen: Vec<String> = Vec::new();
    for r in &m.results {
        for s in &r.by_condition {
            if s.n > 0 && !seen.contains(&s.condition) {
                seen.push(s.condition.clone());
            }
        }
    }
    if !seen.contains(&cfg.treatment) || !seen.contains(&cfg.baseline) {
        seen.sort();
        return Err(EvalError::TooFewConditions(seen));
    }
    Ok(m.results.iter().map(|r| fit_row(r, m.profile, cfg)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_from_published_means() {
        assert_eq!(improvement(MetricId::RetrievalSpeed, 39.0, 146.0).descriptor, "73% faster");
        assert_eq!(improvement(MetricId::KmTime, 152.40, 274.55).descriptor, "44% less KM time");
        assert_eq!(improvement(MetricId::TaskDuration, 10.0, 10.0).descriptor, "0% faster");
        assert_eq!(improvement(MetricId::CompletionQuality, 0.5, 0.4).descriptor, "25% better");
        assert_eq!(improvement(MetricId::CompletionQuality, 0.3, 0.4).descriptor, "25% worse");
        assert_eq!(improvement(MetricId::RetrievalSpeed, 1.0, 0.0).percent, None);
    }

    #[test]
    fn default_models() {
        assert!(default_spec(Profile::Iter1, MetricId::CompletionRatio).random_intercept.is_none());
        assert_eq!(default_spec(Profile::Iter2, MetricId::TaskDuration).terms.len(), 2);
        assert_eq!(default_spec(Profile::Iter3, MetricId::CompletionQuality).terms.len(), 5);
    }
}
