//! Seeded generator of annotated trace corpora.
//!
//! Novices (and journeymen) do every task in both conditions in a
//! counterbalanced order; experts do every task once in their own condition,
//! following the task's canonical steps. Effects are given per condition as
//! `[treatment, baseline]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Annotations, EvalError};
use crate::trace::{Action, Corpus, Expertise, Millis, Role, TraceEvent};

const EPOCH: Millis = 1_704_067_200_000;
const DAY: Millis = 86_400_000;
const SESSION_PAUSE: Millis = 600_000;
const CAPTURE_EVENTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Dissemination,
    Capture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub action: Action,
    #[serde(default)]
    pub target: Option<String>,
    /// Path under the task's site, or a full url; defaults to the task url.
    #[serde(default)]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub name: String,
    pub kind: TaskKind,
    pub url: String,
    pub terms: Vec<String>,
    pub steps: Vec<StepSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    pub retrieval_s: [f64; 2],
    pub time_to_action_s: [f64; 2],
    /// Mean number of queries per session.
    pub queries: [f64; 2],
    pub useful_prob: [f64; 2],
    pub duration_s: [f64; 2],
    pub capture_s: [f64; 2],
    pub quality: [f64; 2],
    pub completion_prob: [f64; 2],
    /// Chance a treatment-condition push is clicked.
    pub push_click_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Noise {
    pub participant_sd_s: f64,
    pub duration_sd_s: f64,
    /// Coefficient of variation of latencies and capture spans.
    pub latency_cv: f64,
    pub quality_sd: f64,
    /// Chance of a stray scroll after each novice step.
    pub stray_action_rate: f64,
    pub step_gap_s: [f64; 2],
}

impl Default for Noise {
    fn default() -> Self {
        Noise {
            participant_sd_s: 60.0,
            duration_sd_s: 30.0,
            latency_cv: 0.3,
            quality_sd: 0.05,
            stray_action_rate: 0.1,
            step_gap_s: [6.0, 12.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub treatment: String,
    pub baseline: String,
    pub expert_condition: String,
    pub novices: usize,
    #[serde(default)]
    pub journeymen: usize,
    pub experts: usize,
    pub time_limit_s: f64,
    pub tasks: Vec<TaskSpec>,
    pub effects: Effects,
    #[serde(default)]
    pub noise: Noise,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, EvalError> {
        let s: Scenario = toml::from_str(text).map_err(|e| EvalError::InvalidScenario(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidScenario(m));
        let conds = [&self.treatment, &self.baseline, &self.expert_condition];
        if conds.iter().any(|c| c.is_empty()) || conds.iter().collect::<BTreeSet<_>>().len() != 3 {
            return bad("treatment, baseline and expert conditions must be distinct and non-empty".into());
        }
        if self.novices + self.journeymen == 0 {
            return bad("no novice or journeyman participants".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(&t.id) || t.id.is_empty() {
                return bad(format!("duplicate or empty task id {:?}", t.id));
            }
            if t.steps.len() < 2 {
                return bad(format!("task {} needs at least two steps", t.id));
            }
            if let Some(s) = t.steps.iter().find(|s| !s.action.is_page_action()) {
                return bad(format!("task {} step action {} is not a page action", t.id, s.action));
            }
        }
        let e = &self.effects;
        let probs = [e.useful_prob, e.completion_prob, e.quality].concat();
        if probs.iter().chain([&e.push_click_prob]).any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities and quality means must lie in [0, 1]".into());
        }
        let times = [e.retrieval_s, e.time_to_action_s, e.duration_s, e.capture_s, e.queries].concat();
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) || self.time_limit_s <= 0.0 {
            return bad("times and query counts must be positive".into());
        }
        let n = &self.noise;
        if [n.participant_sd_s, n.duration_sd_s, n.latency_cv, n.quality_sd].iter().any(|v| v.is_nan() || *v < 0.0)
            || !(0.0..=1.0).contains(&n.stray_action_rate)
            || !(n.step_gap_s[0] > 0.0 && n.step_gap_s[0] <= n.step_gap_s[1])
        {
            return bad("noise parameters out of range".into());
        }
        Ok(())
    }
}

/// Parameters the corpus was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub seed: u64,
    pub effects: Effects,
    /// Per-participant random intercept on task duration, seconds.
    pub participant_effects_s: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub corpus: Corpus,
    pub annotations: Annotations,
    pub truth: SimulationTruth,
}

fn resolve_url(task: &TaskSpec, step: Option<&str>) -> String {
    match step {
        None => task.url.clone(),
        Some(u) if u.contains("://") => u.to_string(),
        Some(path) => {
            let origin_end = task
                .url
                .find("://")
                .map(|i| i + 3)
                .and_then(|s| task.url[s..].find('/').map(|j| s + j))
                .unwrap_or(task.url.len());
            format!("{}{}", &task.url[..origin_end], path)
        }
    }
}

fn terms_payload(task: &TaskSpec) -> Map<String, Value> {
    let n = task.terms.len();
    let terms: Map<String, Value> = task
        .terms
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), Value::from((n - i) as f64)))
        .collect();
    let mut p = Map::new();
    p.insert("terms".into(), Value::Object(terms));
    p
}

struct Builder<'a> {
    template: TraceEvent,
    task: &'a TaskSpec,
    events: Vec<TraceEvent>,
}

impl Builder<'_> {
    fn push(&mut self, ts: Millis, action: Action, url: String, target: Option<String>, payload: Option<Map<String, Value>>) {
        self.events.push(TraceEvent {
            ts,
            action,
            url,
            target,
            payload,
            ..self.template.clone()
        });
    }

    fn step(&mut self, ts: Millis, s: &StepSpec) {
        let url = resolve_url(self.task, s.url.as_deref());
        let payload = (s.action == Action::Navigation).then(|| terms_payload(self.task));
        self.push(ts, s.action, url, s.target.clone(), payload);
    }
}

fn ms(s: f64) -> Millis {
    (s * 1000.0).round() as Millis
}

/// Positive draw with the given mean and coefficient of variation.
fn positive(rng: &mut ChaCha8Rng, mean: f64, cv: f64) -> f64 {
    if cv <= 0.0 {
        return mean;
    }
    let sigma2 = (1.0 + cv * cv).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    Normal::new(mu, sigma2.sqrt()).expect("finite parameters").sample(rng).exp()
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return mean;
    }
    Normal::new(mean, sd).expect("finite parameters").sample(rng)
}

fn gap(rng: &mut ChaCha8Rng, noise: &Noise) -> Millis {
    ms(rng.random_range(noise.step_gap_s[0]..=noise.step_gap_s[1]))
}

/// Deterministic for a given scenario and seed.
pub fn simulate_sessions(sc: &Scenario, seed: u64) -> Result<Simulation, EvalError> {
    sc.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut ann = Annotations::default();
    let mut effects_s = BTreeMap::new();
    let limit = ms(sc.time_limit_s);
    let noise = &sc.noise;

    let learners: Vec<(String, Expertise)> = (0..sc.novices)
        .map(|i| (format!("n{:02}", i + 1), Expertise::Novice))
        .chain((0..sc.journeymen).map(|i| (format!("j{:02}", i + 1), Expertise::Journeyman)))
        .collect();

    for (pi, (pid, expertise)) in learners.iter().enumerate() {
        let u = normal(&mut rng, 0.0, noise.participant_sd_s);
        effects_s.insert(pid.clone(), u);
        let order: [usize; 2] = if pi % 2 == 0 { [0, 1] } else { [1, 0] };
        let mut t0 = EPOCH + pi as Millis * DAY;
        for ci in order {
            let cond = if ci == 0 { &sc.treatment } else { &sc.baseline };
            for task in &sc.tasks {
                let sid = format!("{pid}-{}-{cond}", task.id);
                let template = TraceEvent {
                    ts: t0,
                    session_id: sid.clone(),
                    participant_id: pid.clone(),
                    role: Role::Tutor,
                    expertise: *expertise,
                    condition: cond.clone(),
                    task_id: task.id.clone(),
                    action: Action::Navigation,
                    url: task.url.clone(),
                    target: None,
                    payload: None,
                };
                let mut b = Builder { template, task, events: Vec::new() };
                let e = &sc.effects;
                let steps = &task.steps;
                let middle = &steps[1..steps.len() - 1];
                let mut next_mid = 0;
                let mut t = t0;
                b.step(t, &steps[0]);

                let n_q = normal(&mut rng, e.queries[ci], 0.75).round().max(1.0) as usize;
                for q in 0..n_q {
                    t += gap(&mut rng, noise);
                    let mut p = Map::new();
                    p.insert("text".into(), Value::String(format!("{} {}", task.name, task.terms.join(" "))));
                    b.push(t, Action::Query, task.url.clone(), None, Some(p));
                    t += ms(positive(&mut rng, e.retrieval_s[ci], noise.latency_cv)).max(1);
                    b.push(t, Action::Response, task.url.clone(), None, None);
                    let useful = rng.random::<f64>() < e.useful_prob[ci];
                    let rating = if useful { rng.random_range(2..=4) } else { rng.random_range(0..=1) };
                    ann.rate(&sid, q, rating);
                    t += ms(positive(&mut rng, e.time_to_action_s[ci], noise.latency_cv)).max(1);
                    match middle.get(next_mid) {
                        Some(s) => {
                            b.step(t, s);
                            next_mid += 1;
                        }
                        None => b.push(t, Action::Scroll, task.url.clone(), None, None),
                    }
                    if ci == 0 && q == 0 {
                        let push_ts = t + 1000;
                        let rec = format!("{sid}:sim1");
                        let mut p = Map::new();
                        p.insert("rec".into(), Value::String(rec));
                        b.push(push_ts, Action::PushShareflow, task.url.clone(), None, Some(p.clone()));
                        if rng.random::<f64>() < e.push_click_prob {
                            let click = push_ts + ms(rng.random_range(2.0..10.0));
                            b.push(click, Action::PopupClick, task.url.clone(), None, Some(p));
                            t = t.max(click);
                        } else {
                            t = t.max(push_ts);
                        }
                    }
                }
                for s in &middle[next_mid..] {
                    t += gap(&mut rng, noise);
                    b.step(t, s);
                    if rng.random::<f64>() < noise.stray_action_rate {
                        t += gap(&mut rng, noise);
                        b.push(t, Action::Scroll, resolve_url(task, s.url.as_deref()), None, None);
                    }
                }
                if task.kind == TaskKind::Capture {
                    t += gap(&mut rng, noise);
                    let span = ms(positive(&mut rng, e.capture_s[ci], noise.latency_cv)).max(CAPTURE_EVENTS as Millis);
                    let notes = format!("{}/notes", task.url.trim_end_matches('/'));
                    for k in 0..CAPTURE_EVENTS {
                        let action = if k % 2 == 0 { Action::Select } else { Action::Type };
                        let ts = t + span * k as Millis / (CAPTURE_EVENTS as Millis - 1);
                        b.push(ts, action, notes.clone(), Some("#notes".into()), None);
                    }
                    t += span;
                }
                let target = ms(normal(&mut rng, e.duration_s[ci] + u, noise.duration_sd_s));
                t = (t + gap(&mut rng, noise)).max(t0 + target);
                b.step(t, &steps[steps.len() - 1]);

                let q = normal(&mut rng, e.quality[ci], noise.quality_sd).clamp(0.0, 1.0);
                ann.quality.insert(sid.clone(), (q * 1000.0).round() / 1000.0);
                ann.completed.insert(sid.clone(), rng.random::<f64>() < e.completion_prob[ci]);
                ann.time_limit.insert(sid, limit);
                events.extend(b.events);
                t0 = t + SESSION_PAUSE;
            }
        }
    }

    for xi in 0..sc.experts {
        let pid = format!("e{:02}", xi + 1);
        let mut t0 = EPOCH + (learners.len() + xi) as Millis * DAY;
        let cond = &sc.expert_condition;
        for task in &sc.tasks {
            let sid = format!("{pid}-{}-{cond}", task.id);
            let template = TraceEvent {
                ts: t0,
                session_id: sid.clone(),
                participant_id: pid.clone(),
                role: Role::Lecturer,
                expertise: Expertise::Expert,
                condition: cond.clone(),
                task_id: task.id.clone(),
                action: Action::Navigation,
                url: task.url.clone(),
                target: None,
                payload: None,
            };
            let mut b = Builder { template, task, events: Vec::new() };
            let mut t = t0;
            for (k, s) in task.steps.iter().enumerate() {
                if k > 0 {
                    t += gap(&mut rng, noise);
                }
                b.step(t, s);
            }
            ann.quality.insert(sid.clone(), 1.0);
            ann.completed.insert(sid.clone(), true);
            ann.time_limit.insert(sid, limit);
            events.extend(b.events);
            t0 = t + SESSION_PAUSE;
        }
    }

    let mut corpus = Corpus::from_events(events, format!("simulated:{}:{seed}", sc.name));
    ann.apply_outcomes(&mut corpus);
    Ok(Simulation {
        corpus,
        annotations: ann,
        truth: SimulationTruth {
            seed,
            effects: sc.effects.clone(),
            participant_effects_s: effects_s,
        },
    })
}
