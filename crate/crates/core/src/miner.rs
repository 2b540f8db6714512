//! Heuristic miner over expert step logs.
//!
//! Builds the directly-follows table, scores each observed succession with
//! the dependency measure and keeps the edges that pass the three classic
//! thresholds. [`extract_main_flow`] linearizes the result into the step
//! list a ShareFlow is built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Action, Session, TraceEvent};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MinerError {
    #[error("step log has no traces")]
    EmptyLog,
    #[error("no path connects a start node to an end node")]
    NoPath,
    #[error("invalid miner config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub traces: Vec<Vec<String>>,
}

impl StepLog {
    pub fn new(traces: Vec<Vec<String>>) -> Self {
        StepLog { traces }
    }

    /// Step log from recorded sessions: user page actions only, canonical
    /// labels, consecutive repeats collapsed.
    pub fn from_sessions<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> Self {
        let traces = sessions
            .into_iter()
            .map(|s| session_steps(&s.events))
            .filter(|t| !t.is_empty())
            .collect();
        StepLog { traces }
    }

    fn is_empty(&self) -> bool {
        self.traces.iter().all(|t| t.is_empty())
    }
}

pub fn session_steps(events: &[TraceEvent]) -> Vec<String> {
    let mut steps: Vec<String> = Vec::new();
    for ev in events.iter().filter(|e| e.action.is_page_action()) {
        let label = step_label(ev);
        if steps.last() != Some(&label) {
            steps.push(label);
        }
    }
    steps
}

/// `action:target` when a target is present, otherwise `action:<url path>`.
pub fn step_label(ev: &TraceEvent) -> String {
    match &ev.target {
        Some(t) if !t.is_empty() => format!("{}:{t}", ev.action),
        _ => format!("{}:{}", ev.action, url_path(&ev.url)),
    }
}

pub fn url_path(url: &str) -> &str {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    let path = rest.find('/').map_or("/", |i| &rest[i..]);
    path.split(['?', '#']).next().unwrap_or("/")
}

/// Splits a step label back into its action and detail.
pub fn parse_step_label(label: &str) -> (Option<Action>, &str) {
    match label.split_once(':') {
        Some((a, rest)) => (Action::parse(a), rest),
        None => (None, label),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FollowsTable {
    /// `|a>b|` for every observed succession.
    pub counts: BTreeMap<(String, String), u64>,
    /// Occurrences of every label.
    pub frequencies: BTreeMap<String, u64>,
    pub starts: BTreeSet<String>,
    pub ends: BTreeSet<String>,
}

impl FollowsTable {
    pub fn get(&self, a: &str, b: &str) -> u64 {
        self.counts
            .get(&(a.to_string(), b.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

pub fn directly_follows(log: &StepLog) -> Result<FollowsTable, MinerError> {
    if log.is_empty() {
        return Err(MinerError::EmptyLog);
    }
    let mut table = FollowsTable::default();
    for trace in log.traces.iter().filter(|t| !t.is_empty()) {
        for label in trace {
            *table.frequencies.entry(label.clone()).or_insert(0) += 1;
        }
        for pair in trace.windows(2) {
            *table
                .counts
                .entry((pair[0].clone(), pair[1].clone()))
                .or_insert(0) += 1;
        }
        table.starts.insert(trace[0].clone());
        table.ends.insert(trace[trace.len() - 1].clone());
    }
    Ok(table)
}

pub fn dependency_measure(counts: &FollowsTable, a: &str, b: &str) -> f64 {
    let ab = counts.get(a, b) as f64;
    if a == b {
        return ab / (ab + 1.0);
    }
    let ba = counts.get(b, a) as f64;
    (ab - ba) / (ab + ba + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub dependency_threshold: f64,
    pub min_observations: u64,
    pub relative_to_best: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            dependency_threshold: 0.9,
            min_observations: 1,
            relative_to_best: 0.05,
        }
    }
}

impl MinerConfig {
    fn check(&self) -> Result<(), MinerError> {
        if !(0.0..=1.0).contains(&self.dependency_threshold) {
            return Err(MinerError::InvalidConfig("dependency_threshold outside [0,1]".into()));
        }
        if self.min_observations < 1 {
            return Err(MinerError::InvalidConfig("min_observations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub count: u64,
    pub dependency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: BTreeMap<String, u64>,
    pub edges: Vec<Edge>,
    pub starts: BTreeSet<String>,
    pub ends: BTreeSet<String>,
}

impl DependencyGraph {
    pub fn edge(&self, a: &str, b: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.from == a && e.to == b)
    }

    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect()
    }

    /// Plain-text edge list, one `from<TAB>to<TAB>count<TAB>dependency` row per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::from("from\tto\tcount\tdependency\n");
        for e in &self.edges {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", e.from, e.to, e.count, e.dependency);
        }
        out
    }
}

pub fn mine_dependency_graph(
    log: &StepLog,
    cfg: &MinerConfig,
) -> Result<DependencyGraph, MinerError> {
    cfg.check()?;
    let table = directly_follows(log)?;
    let mut best_out: BTreeMap<&str, f64> = BTreeMap::new();
    for (a, b) in table.counts.keys() {
        let d = dependency_measure(&table, a, b);
        let best = best_out.entry(a.as_str()).or_insert(f64::NEG_INFINITY);
        *best = best.max(d);
    }
    let mut edges = Vec::new();
    for ((a, b), &count) in &table.counts {
        let d = dependency_measure(&table, a, b);
        if d >= cfg.dependency_threshold
            && count >= cfg.min_observations
            && d >= best_out[a.as_str()] - cfg.relative_to_best
        {
            edges.push(Edge {
                from: a.clone(),
                to: b.clone(),
                count,
                dependency: d,
            });
        }
    }
    Ok(DependencyGraph {
        nodes: table.frequencies,
        edges,
        starts: table.starts,
        ends: table.ends,
    })
}

const PATH_BUDGET: usize = 2_000_000;

#[derive(Clone)]
struct Best {
    score: u128,
    path: Vec<String>,
}

fn better(score: u128, path: &[String], best: &Option<Best>) -> bool {
    match best {
        None => true,
        Some(b) => score > b.score || (score == b.score && path < b.path.as_slice()),
    }
}

/// Highest-scoring simple path from a start node to an end node, scored by
/// the product of edge counts; ties go to the lexicographically smaller
/// label sequence.
pub fn extract_main_flow(g: &DependencyGraph) -> Result<Vec<String>, MinerError> {
    if g.starts.is_empty() {
        return Err(MinerError::NoPath);
    }
    let mut adj: BTreeMap<&str, Vec<(&str, u64)>> = BTreeMap::new();
    for e in &g.edges {
        if e.from != e.to {
            adj.entry(e.from.as_str()).or_default().push((e.to.as_str(), e.count));
        }
    }
    let mut best: Option<Best> = None;
    let mut budget = PATH_BUDGET;
    for start in &g.starts {
        let mut path = vec![start.clone()];
        let mut on_path = BTreeSet::from([start.as_str()]);
        dfs(g, &adj, start, 1, &mut path, &mut on_path, &mut best, &mut budget);
    }
    let mut flow = best.ok_or(MinerError::NoPath)?.path;
    flow.dedup();
    Ok(flow)
}

#[allow(clippy::too_many_arguments)]
fn dfs<'g>(
    g: &'g DependencyGraph,
    adj: &BTreeMap<&'g str, Vec<(&'g str, u64)>>,
    node: &'g str,
    score: u128,
    path: &mut Vec<String>,
    on_path: &mut BTreeSet<&'g str>,
    best: &mut Option<Best>,
    budget: &mut usize,
) {
    if *budget == 0 {
        return;
    }
    *budget -= 1;
    if g.ends.contains(node) && better(score, path, best) {
        *best = Some(Best {
            score,
            path: path.clone(),
        });
    }
    let Some(next) = adj.get(node) else { return };
    for &(to, count) in next {
        if on_path.contains(to) {
            continue;
        }
        path.push(to.to_string());
        on_path.insert(to);
        dfs(g, adj, to, score.saturating_mul(count as u128), path, on_path, best, budget);
        on_path.remove(to);
        path.pop();
    }
}
