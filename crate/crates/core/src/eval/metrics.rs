use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Annotations, EvalError};
use crate::coder::{code_session, CoderConfig};
use crate::trace::{Action, Corpus, Millis, Outcome, Session, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    RetrievalSpeed,
    TimeToAction,
    RelevantResponseRatio,
    ActionCount,
    TaskDuration,
    CaptureEfficiency,
    JustEnoughResponses,
    CompletionRatio,
    CompletionQuality,
    FailureRate,
    KmTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Seconds,
    Ratio,
    Count,
    Score,
    SecondsPerQuality,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Seconds => "s",
            Unit::Ratio => "ratio",
            Unit::Count => "count",
            Unit::Score => "score",
            Unit::SecondsPerQuality => "s/quality",
        }
    }
}

/// Continuous metrics go to the mixed model, binary ones to logistic regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Continuous,
    Binary,
}

impl MetricId {
    pub const ALL: [MetricId; 11] = [
        MetricId::RetrievalSpeed,
        MetricId::TimeToAction,
        MetricId::RelevantResponseRatio,
        MetricId::ActionCount,
        MetricId::TaskDuration,
        MetricId::CaptureEfficiency,
        MetricId::JustEnoughResponses,
        MetricId::CompletionRatio,
        MetricId::CompletionQuality,
        MetricId::FailureRate,
        MetricId::KmTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::RetrievalSpeed => "retrieval_speed",
            MetricId::TimeToAction => "time_to_action",
            MetricId::RelevantResponseRatio => "relevant_response_ratio",
            MetricId::ActionCount => "action_count",
            MetricId::TaskDuration => "task_duration",
            MetricId::CaptureEfficiency => "capture_efficiency",
            MetricId::JustEnoughResponses => "just_enough_responses",
            MetricId::CompletionRatio => "completion_ratio",
            MetricId::CompletionQuality => "completion_quality",
            MetricId::FailureRate => "failure_rate",
            MetricId::KmTime => "km_time",
        }
    }

    pub fn parse(s: &str) -> Option<MetricId> {
        MetricId::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn label(self) -> &'static str {
        match self {
            MetricId::RetrievalSpeed => "Retrieval speed",
            MetricId::TimeToAction => "Time to action",
            MetricId::RelevantResponseRatio => "Relevant responses ratio",
            MetricId::ActionCount => "User actions",
            MetricId::TaskDuration => "Task duration",
            MetricId::CaptureEfficiency => "Knowledge capture efficiency",
            MetricId::JustEnoughResponses => "Just enough responses",
            MetricId::CompletionRatio => "Task completion ratio",
            MetricId::CompletionQuality => "Task completion quality",
            MetricId::FailureRate => "Failure rate",
            MetricId::KmTime => "KM time",
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            MetricId::RetrievalSpeed
            | MetricId::TimeToAction
            | MetricId::TaskDuration
            | MetricId::KmTime => Unit::Seconds,
            MetricId::RelevantResponseRatio | MetricId::CompletionRatio | MetricId::FailureRate => Unit::Ratio,
            MetricId::ActionCount | MetricId::JustEnoughResponses => Unit::Count,
            MetricId::CompletionQuality => Unit::Score,
            MetricId::CaptureEfficiency => Unit::SecondsPerQuality,
        }
    }

    pub fn kind(self) -> MetricKind {
        match self {
            MetricId::RelevantResponseRatio | MetricId::CompletionRatio | MetricId::FailureRate => {
                MetricKind::Binary
            }
            _ => MetricKind::Continuous,
        }
    }

    pub fn lower_is_better(self) -> bool {
        !matches!(
            self,
            MetricId::RelevantResponseRatio | MetricId::CompletionRatio | MetricId::CompletionQuality
        )
    }

    /// Wording for an improvement and for a regression.
    pub fn phrases(self) -> (&'static str, &'static str) {
        match self {
            MetricId::RetrievalSpeed | MetricId::TimeToAction | MetricId::TaskDuration => ("faster", "slower"),
            MetricId::KmTime => ("less KM time", "more KM time"),
            MetricId::CaptureEfficiency => ("lower effort", "higher effort"),
            MetricId::JustEnoughResponses => ("fewer queries", "more queries"),
            MetricId::ActionCount => ("fewer actions", "more actions"),
            MetricId::FailureRate => ("fewer failures", "more failures"),
            MetricId::RelevantResponseRatio => ("more relevant responses", "fewer relevant responses"),
            MetricId::CompletionRatio => ("increase", "decrease"),
            MetricId::CompletionQuality => ("better", "worse"),
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which evaluation round's metric set to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Iter1,
    Iter2,
    Iter3,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "iter1" => Some(Profile::Iter1),
            "iter2" => Some(Profile::Iter2),
            "iter3" => Some(Profile::Iter3),
            _ => None,
        }
    }

    pub fn metrics(self) -> &'static [MetricId] {
        use MetricId::*;
        match self {
            Profile::Iter1 => &[
                RetrievalSpeed,
                TimeToAction,
                RelevantResponseRatio,
                ActionCount,
                TaskDuration,
                CaptureEfficiency,
                JustEnoughResponses,
                CompletionRatio,
                CompletionQuality,
            ],
            Profile::Iter2 => &[
                RetrievalSpeed,
                TaskDuration,
                CaptureEfficiency,
                JustEnoughResponses,
                CompletionRatio,
                CompletionQuality,
            ],
            Profile::Iter3 => &[TaskDuration, KmTime, CompletionQuality, FailureRate, ActionCount],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Ratings at or above this count as useful.
    pub relevance_threshold: u8,
    pub coder: CoderConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            relevance_threshold: 2,
            coder: CoderConfig::default(),
        }
    }
}

/// One observation with the factors the models need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub session_id: String,
    pub participant: String,
    pub condition: String,
    pub task: String,
    /// Condition the participant used first.
    pub start: String,
    pub outcome: Outcome,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 when n < 2.
    pub sd: f64,
}

impl ConditionSummary {
    pub fn of(condition: &str, values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        ConditionSummary {
            condition: condition.to_string(),
            n,
            mean,
            sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricId,
    pub unit: Unit,
    pub values: Vec<MetricValue>,
    pub by_condition: Vec<ConditionSummary>,
    pub notes: Vec<String>,
}

impl MetricResult {
    pub fn condition(&self, c: &str) -> Option<&ConditionSummary> {
        self.by_condition.iter().find(|s| s.condition == c)
    }

    pub fn values_for(&self, c: &str) -> Vec<f64> {
        self.values.iter().filter(|v| v.condition == c).map(|v| v.value).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFailure {
    pub metric: MetricId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub profile: Profile,
    pub results: Vec<MetricResult>,
    pub failures: Vec<MetricFailure>,
}

impl MetricSet {
    pub fn get(&self, m: MetricId) -> Option<&MetricResult> {
        self.results.iter().find(|r| r.metric == m)
    }

    /// Per-observation table: `metric,session,participant,condition,task,start,outcome,value`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "session", "participant", "condition", "task", "start", "outcome", "value"])
            .expect("in-memory csv write");
        for r in &self.results {
            for v in &r.values {
                let outcome = match v.outcome {
                    Outcome::Pass => "pass",
                    Outcome::Fail => "fail",
                    Outcome::Unknown => "unknown",
                };
                w.write_record([
                    r.metric.as_str(),
                    &v.session_id,
                    &v.participant,
                    &v.condition,
                    &v.task,
                    &v.start,
                    outcome,
                    &format!("{:.6}", v.value),
                ])
                .expect("in-memory csv write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }
}

fn secs(ms: Millis) -> f64 {
    ms as f64 / 1000.0
}

/// `response.ts − query.ts` for each query answered before the next query.
pub fn response_latencies(events: &[TraceEvent]) -> Vec<Millis> {
    let mut out = Vec::new();
    for (i, e) in events.iter().enumerate().filter(|(_, e)| e.action == Action::Query) {
        for f in &events[i + 1..] {
            match f.action {
                Action::Response => {
                    out.push(f.ts - e.ts);
                    break;
                }
                Action::Query => break,
                _ => {}
            }
        }
    }
    out
}

/// Gap from each response to the next direct user action on the page.
pub fn time_to_action(events: &[TraceEvent]) -> Vec<Millis> {
    let mut out = Vec::new();
    for (i, e) in events.iter().enumerate().filter(|(_, e)| e.action == Action::Response) {
        if let Some(next) = events[i + 1..].iter().find(|f| f.action.is_page_action()) {
            out.push(next.ts - e.ts);
        }
    }
    out
}

/// Information-locating intervals: from each query through its response to
/// the first page action after it, merged where chains overlap.
pub fn information_intervals(events: &[TraceEvent]) -> Vec<(Millis, Millis)> {
    let mut raw: Vec<(Millis, Millis)> = Vec::new();
    for (i, q) in events.iter().enumerate().filter(|(_, e)| e.action == Action::Query) {
        let rest = &events[i + 1..];
        let resp = rest
            .iter()
            .position(|f| f.action == Action::Response || f.action == Action::Query)
            .filter(|&j| rest[j].action == Action::Response);
        let from = resp.map_or(0, |j| j + 1);
        let end = rest[from..]
            .iter()
            .find(|f| f.action.is_page_action())
            .map(|f| f.ts)
            .or_else(|| resp.map(|j| rest[j].ts))
            .unwrap_or(q.ts);
        raw.push((q.ts, end));
    }
    raw.sort();
    let mut merged: Vec<(Millis, Millis)> = Vec::new();
    for (a, b) in raw {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

pub fn km_time(events: &[TraceEvent]) -> Millis {
    information_intervals(events).iter().map(|(a, b)| b - a).sum()
}

/// Raw inputs of the capture-efficiency composite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureComponents {
    pub session_id: String,
    pub condition: String,
    /// Summed span of contiguous runs of store-process lines.
    pub capture_ms: Millis,
    pub duration_ms: Millis,
    pub quality: Option<f64>,
}

fn capture_ms(s: &Session, coder: &CoderConfig) -> Millis {
    let lines = code_session(s, coder).lines;
    let mut total = 0;
    let mut run: Option<(Millis, Millis)> = None;
    for l in &lines {
        if l.code.is_store() {
            run = Some(match run {
                Some((a, b)) => (a, b.max(l.end_ts)),
                None => (l.ts, l.end_ts),
            });
        } else if let Some((a, b)) = run.take() {
            total += b - a;
        }
    }
    if let Some((a, b)) = run {
        total += b - a;
    }
    total
}

pub fn capture_components(c: &Corpus, a: &Annotations, coder: &CoderConfig) -> Vec<CaptureComponents> {
    c.sessions
        .iter()
        .map(|s| CaptureComponents {
            session_id: s.session_id().to_string(),
            condition: s.key.condition.clone(),
            capture_ms: capture_ms(s, coder),
            duration_ms: duration(s),
            quality: a.quality.get(s.session_id()).copied(),
        })
        .collect()
}

fn duration(s: &Session) -> Millis {
    s.end_ts().unwrap_or(0) - s.start_ts().unwrap_or(0)
}

fn start_conditions(c: &Corpus) -> BTreeMap<&str, &str> {
    let mut first: BTreeMap<&str, (Millis, &str)> = BTreeMap::new();
    for s in &c.sessions {
        if let Some(ts) = s.start_ts() {
            let e = first.entry(s.key.participant_id.as_str()).or_insert((ts, s.key.condition.as_str()));
            if ts < e.0 {
                *e = (ts, s.key.condition.as_str());
            }
        }
    }
    first.into_iter().map(|(p, (_, c))| (p, c)).collect()
}

fn missing(kind: &str, s: &Session) -> EvalError {
    EvalError::MissingAnnotation {
        kind: kind.to_string(),
        session: s.session_id().to_string(),
    }
}

/// Ratings for every query in the session, in query order.
fn ratings(s: &Session, a: &Annotations) -> Result<Vec<u8>, EvalError> {
    let n = s.events.iter().filter(|e| e.action == Action::Query).count();
    if n == 0 {
        return Ok(Vec::new());
    }
    let map = a.relevance.get(s.session_id()).ok_or_else(|| missing("relevance", s))?;
    (0..n)
        .map(|q| map.get(&q).copied().ok_or_else(|| missing("relevance", s)))
        .collect()
}

pub fn compute_metric(
    c: &Corpus,
    a: &Annotations,
    metric: MetricId,
    cfg: &MetricConfig,
) -> Result<MetricResult, EvalError> {
    let starts = start_conditions(c);
    let mut values = Vec::new();
    let mut notes = Vec::new();
    for s in &c.sessions {
        let obs = |v: f64| MetricValue {
            session_id: s.session_id().to_string(),
            participant: s.key.participant_id.clone(),
            condition: s.key.condition.clone(),
            task: s.key.task_id.clone(),
            start: starts.get(s.key.participant_id.as_str()).copied().unwrap_or("").to_string(),
            outcome: s.outcome,
            value: v,
        };
        let sid = s.session_id();
        match metric {
            MetricId::RetrievalSpeed => {
                values.extend(response_latencies(&s.events).into_iter().map(|d| obs(secs(d))));
            }
            MetricId::TimeToAction => {
                values.extend(time_to_action(&s.events).into_iter().map(|d| obs(secs(d))));
            }
            MetricId::RelevantResponseRatio => {
                for r in ratings(s, a)? {
                    values.push(obs(f64::from(u8::from(r >= cfg.relevance_threshold))));
                }
            }
            MetricId::ActionCount => {
                let n = s.events.iter().filter(|e| e.action.is_page_action()).count();
                values.push(obs(n as f64));
            }
            MetricId::TaskDuration => values.push(obs(secs(duration(s)))),
            MetricId::KmTime => {
                if s.events.iter().any(|e| e.action == Action::Query) {
                    values.push(obs(secs(km_time(&s.events))));
                }
            }
            MetricId::JustEnoughResponses => {
                let r = ratings(s, a)?;
                if r.is_empty() {
                    continue;
                }
                match r.iter().position(|&x| x >= cfg.relevance_threshold) {
                    Some(i) => values.push(obs((i + 1) as f64)),
                    None => notes.push(format!("{sid}: no useful response, excluded")),
                }
            }
            MetricId::CaptureEfficiency => {
                let cap = capture_ms(s, &cfg.coder);
                if cap == 0 {
                    continue;
                }
                let q = *a.quality.get(sid).ok_or_else(|| missing("quality", s))?;
                if q <= 0.0 {
                    notes.push(format!("{sid}: zero quality, excluded"));
                    continue;
                }
                values.push(obs(secs(cap) / q));
            }
            MetricId::CompletionRatio => {
                let done = *a.completed.get(sid).ok_or_else(|| missing("completion", s))?;
                values.push(obs(f64::from(u8::from(done))));
            }
            MetricId::CompletionQuality => {
                values.push(obs(*a.quality.get(sid).ok_or_else(|| missing("quality", s))?));
            }
            MetricId::FailureRate => {
                let f = a.failed(sid, duration(s)).ok_or_else(|| missing("completion", s))?;
                values.push(obs(f64::from(u8::from(f))));
            }
        }
    }
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for v in &values {
        grouped.entry(v.condition.as_str()).or_default().push(v.value);
    }
    let by_condition = grouped.iter().map(|(c, vs)| ConditionSummary::of(c, vs)).collect();
    Ok(MetricResult {
        metric,
        unit: metric.unit(),
        values,
        by_condition,
        notes,
    })
}

/// Every metric of the profile; a missing annotation fails only the
/// metrics that need it.
pub fn compute_metrics(c: &Corpus, a: &Annotations, profile: Profile, cfg: &MetricConfig) -> MetricSet {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &m in profile.metrics() {
        match compute_metric(c, a, m, cfg) {
            Ok(r) => results.push(r),
            Err(e) => failures.push(MetricFailure {
                metric: m,
                error: e.to_string(),
            }),
        }
    }
    MetricSet {
        profile,
        results,
        failures,
    }
}
