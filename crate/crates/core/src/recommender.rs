//! Context detection and push decisions for ShareFlow and knowledge
//! recommendations.
//!
//! [`RecommenderEngine`] holds per-session state and is the single code path
//! behind both batch replay and the HTTP service, which is what makes the
//! two produce identical push logs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::coder::{code_prefix, CoderConfig, KmCode};
use crate::miner::parse_step_label;
use crate::repository::{is_stopword, tokenize, KnowledgeIndex, SearchResult};
use crate::shareflow::ShareFlow;
use crate::trace::{Action, Corpus, Expertise, Millis, Role, TraceEvent};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecommenderError {
    #[error("event prefix is empty")]
    EmptyPrefix,
    #[error("no usable query terms")]
    NoQuery,
    #[error("unknown recommendation {0:?}")]
    UnknownRecommendation(String),
}

pub const DEFAULT_RECENT_CODES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: String,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDescriptor {
    pub session_id: String,
    pub participant_id: String,
    pub expertise: Expertise,
    pub active_url: String,
    /// Sorted by weight descending, then term.
    pub page_terms: Vec<(String, f64)>,
    pub recent_codes: Vec<KmCode>,
    pub candidate_tasks: Vec<String>,
    /// Reserved for semester-timing policies; not populated yet.
    pub semester_week: Option<u32>,
}

pub fn detect_context(
    prefix: &[TraceEvent],
    coder: &CoderConfig,
    tasks: &[TaskDescriptor],
    recent_n: usize,
) -> Result<ContextDescriptor, RecommenderError> {
    let last = prefix.last().ok_or(RecommenderError::EmptyPrefix)?;
    let mut terms: BTreeMap<String, f64> = BTreeMap::new();
    for ev in prefix.iter().filter(|e| e.url == last.url) {
        for (t, w) in ev.page_terms() {
            if w >= 0.0 {
                *terms.entry(t.to_lowercase()).or_insert(0.0) += w;
            }
        }
    }
    let mut page_terms: Vec<(String, f64)> = terms.into_iter().collect();
    page_terms.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let coded = code_prefix(prefix, coder);
    let codes: Vec<KmCode> = coded.lines.iter().map(|l| l.code).collect();
    let recent_codes = codes[codes.len().saturating_sub(recent_n)..].to_vec();

    let mut ranked: Vec<(String, f64)> = tasks
        .iter()
        .map(|t| {
            let overlap = page_terms
                .iter()
                .filter(|(term, _)| t.terms.iter().any(|d| d.eq_ignore_ascii_case(term)))
                .map(|(_, w)| w)
                .sum();
            (t.task_id.clone(), overlap)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    Ok(ContextDescriptor {
        session_id: last.session_id.clone(),
        participant_id: last.participant_id.clone(),
        expertise: last.expertise,
        active_url: last.url.clone(),
        page_terms,
        recent_codes,
        candidate_tasks: ranked.into_iter().map(|(t, _)| t).collect(),
        semester_week: None,
    })
}

/// Turns weighted page terms into a retrieval query.
pub trait QuerySynthesizer {
    fn synthesize(&self, page_terms: &[(String, f64)], limit: usize) -> Result<String, RecommenderError>;
}

/// Deterministic default: the `limit` heaviest non-stopword terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermRankSynthesizer;

impl QuerySynthesizer for TermRankSynthesizer {
    fn synthesize(&self, page_terms: &[(String, f64)], limit: usize) -> Result<String, RecommenderError> {
        synthesize_query(page_terms, limit)
    }
}

pub fn synthesize_query(page_terms: &[(String, f64)], limit: usize) -> Result<String, RecommenderError> {
    let mut terms: Vec<(String, f64)> = page_terms
        .iter()
        .map(|(t, w)| (t.trim().to_lowercase(), *w))
        .filter(|(t, w)| !t.is_empty() && *w > 0.0 && !is_stopword(t))
        .collect();
    terms.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    terms.dedup_by(|a, b| a.0 == b.0);
    if terms.is_empty() || limit == 0 {
        return Err(RecommenderError::NoQuery);
    }
    Ok(terms
        .into_iter()
        .take(limit)
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join(" "))
}

/// Code sequence of a ShareFlow: its steps replayed as synthetic events
/// spaced by the dwell threshold and run through the coder.
pub fn flow_codes(sf: &ShareFlow, coder: &CoderConfig) -> Vec<KmCode> {
    let mut url = format!("flow://{}/", sf.task_id);
    let mut events = Vec::with_capacity(sf.steps.len());
    for (i, step) in sf.steps.iter().enumerate() {
        let (action, detail) = parse_step_label(&step.label);
        let Some(action) = action else { continue };
        let target = if detail.starts_with('/') {
            url = format!("flow://{}{detail}", sf.task_id);
            None
        } else {
            Some(detail.to_string())
        };
        events.push(TraceEvent {
            ts: i as Millis * coder.dwell_threshold,
            session_id: sf.id.clone(),
            participant_id: sf.author.participant_id.clone(),
            role: Role::Tutor,
            expertise: Expertise::Expert,
            condition: String::new(),
            task_id: sf.task_id.clone(),
            action,
            url: url.clone(),
            target,
            payload: None,
        });
    }
    code_prefix(&events, coder).lines.iter().map(|l| l.code).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Weight of the workflow-position signal; the page-term signal gets the rest.
    pub prefix_weight: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { prefix_weight: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCandidate {
    pub flow_id: String,
    pub score: f64,
    pub prefix_score: f64,
    pub term_score: f64,
}

fn lcp(a: &[KmCode], b: &[KmCode]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

pub fn match_shareflows(
    ctx: &ContextDescriptor,
    library: &[ShareFlow],
    coder: &CoderConfig,
    cfg: &MatchConfig,
) -> Vec<FlowCandidate> {
    let total_weight: f64 = ctx.page_terms.iter().map(|(_, w)| w).sum();
    let mut out: Vec<FlowCandidate> = library
        .iter()
        .map(|sf| {
            let codes = flow_codes(sf, coder);
            let prefix_score = if codes.is_empty() {
                0.0
            } else {
                lcp(&ctx.recent_codes, &codes) as f64 / codes.len() as f64
            };
            let vocab: BTreeSet<String> = tokenize(&sf.searchable_text()).into_iter().collect();
            let term_score = if total_weight > 0.0 {
                ctx.page_terms
                    .iter()
                    .filter(|(t, _)| vocab.contains(t))
                    .map(|(_, w)| w)
                    .sum::<f64>()
                    / total_weight
            } else {
                0.0
            };
            FlowCandidate {
                flow_id: sf.id.clone(),
                score: cfg.prefix_weight * prefix_score + (1.0 - cfg.prefix_weight) * term_score,
                prefix_score,
                term_score,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.flow_id.cmp(&b.flow_id)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationKind {
    ShareflowPush,
    KnowledgePush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Payload {
    Shareflow(String),
    Knowledge(Vec<SearchResult>),
}

impl Payload {
    /// Identity used for cooldown bookkeeping.
    pub fn key(&self) -> String {
        match self {
            Payload::Shareflow(id) => format!("shareflow:{id}"),
            Payload::Knowledge(results) => {
                let ids: Vec<&str> = results.iter().map(|r| r.doc_id.as_str()).collect();
                format!("knowledge:{}", ids.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Queued,
    Delivered,
    Interacted,
    Expired,
    Suppressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressReason {
    Cooldown,
    MaxActive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub session_id: String,
    pub kind: RecommendationKind,
    pub payload: Payload,
    pub score: f64,
    pub issued_ts: Millis,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<SuppressReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_ts: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_ts: Option<Millis>,
}

impl Recommendation {
    pub fn is_active(&self) -> bool {
        matches!(self.status, Status::Queued | Status::Delivered)
    }

    pub fn is_pushed(&self) -> bool {
        self.status != Status::Suppressed
    }

    /// Applies a lifecycle step; only queued→delivered→{interacted, expired} is allowed.
    fn transition(&mut self, to: Status, ts: Millis) -> bool {
        let ok = matches!(
            (self.status, to),
            (Status::Queued, Status::Delivered)
                | (Status::Delivered, Status::Interacted)
                | (Status::Delivered, Status::Expired)
        );
        if ok {
            self.status = to;
            if to == Status::Delivered {
                self.delivered_ts = Some(ts);
            } else {
                self.resolved_ts = Some(ts);
            }
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PushPolicyConfig {
    pub min_score: f64,
    /// Per (session, payload), in ms.
    pub cooldown: Millis,
    pub max_active: usize,
    /// Keeps resolved recommendations queryable instead of re-pushing them.
    pub resurface_enabled: bool,
    /// Additive score adjustment per expertise level; empty means off.
    #[serde(default)]
    pub expertise_adjustment: BTreeMap<Expertise, f64>,
}

impl Default for PushPolicyConfig {
    fn default() -> Self {
        PushPolicyConfig {
            min_score: 0.5,
            cooldown: 10 * 60_000,
            max_active: 2,
            resurface_enabled: true,
            expertise_adjustment: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushCandidate {
    pub kind: RecommendationKind,
    pub payload: Payload,
    pub score: f64,
}

/// Recommendations issued for one session, in issue order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PushLog {
    pub session_id: String,
    pub entries: Vec<Recommendation>,
}

impl PushLog {
    pub fn new(session_id: &str) -> Self {
        PushLog {
            session_id: session_id.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn active(&self) -> usize {
        self.entries.iter().filter(|r| r.is_active()).count()
    }

    pub fn get(&self, id: &str) -> Option<&Recommendation> {
        self.entries.iter().find(|r| r.id == id)
    }

    fn get_mut(&mut self, id: &str) -> Option<&mut Recommendation> {
        self.entries.iter_mut().find(|r| r.id == id)
    }

    fn next_id(&self, extra: usize) -> String {
        format!("{}:r{}", self.session_id, self.entries.len() + extra + 1)
    }
}

/// Filters candidates through the push policy. Candidates under
/// `min_score` are dropped; cooldown and `max_active` rejections come back
/// as suppressed recommendations with a reason.
pub fn decide_push(
    candidates: &[PushCandidate],
    history: &PushLog,
    policy: &PushPolicyConfig,
    now: Millis,
) -> Vec<Recommendation> {
    let mut active = history.active();
    let mut recent: BTreeSet<String> = history
        .entries
        .iter()
        .filter(|r| r.is_pushed() && now - r.issued_ts < policy.cooldown)
        .map(|r| r.payload.key())
        .collect();
    let mut out: Vec<Recommendation> = Vec::new();
    for c in candidates {
        let score = c.score.clamp(0.0, 1.0);
        if score < policy.min_score {
            continue;
        }
        let key = c.payload.key();
        let reason = if recent.contains(&key) {
            Some(SuppressReason::Cooldown)
        } else if active >= policy.max_active {
            Some(SuppressReason::MaxActive)
        } else {
            None
        };
        if reason.is_none() {
            active += 1;
            recent.insert(key);
        }
        out.push(Recommendation {
            id: history.next_id(out.len()),
            session_id: history.session_id.clone(),
            kind: c.kind,
            payload: c.payload.clone(),
            score,
            issued_ts: now,
            status: if reason.is_some() { Status::Suppressed } else { Status::Queued },
            reason,
            delivered_ts: None,
            resolved_ts: None,
        });
    }
    out
}

/// Resolves a delivered recommendation against an incoming event: a popup
/// click inside the window marks it interacted, any event past the window
/// marks it expired.
pub fn record_interaction(
    log: &mut PushLog,
    rec_id: &str,
    event: &TraceEvent,
    window: Millis,
) -> Result<Recommendation, RecommenderError> {
    let rec = log
        .get_mut(rec_id)
        .ok_or_else(|| RecommenderError::UnknownRecommendation(rec_id.to_string()))?;
    if rec.status == Status::Queued {
        rec.transition(Status::Delivered, rec.issued_ts);
    }
    if rec.status == Status::Delivered {
        let delivered = rec.delivered_ts.unwrap_or(rec.issued_ts);
        let elapsed = event.ts - delivered;
        if event.action == Action::PopupClick && (0..=window).contains(&elapsed) {
            rec.transition(Status::Interacted, event.ts);
        } else if elapsed > window {
            rec.transition(Status::Expired, delivered + window);
        }
    }
    Ok(rec.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub coder: CoderConfig,
    pub policy: PushPolicyConfig,
    pub matching: MatchConfig,
    pub recent_codes: usize,
    pub query_terms: usize,
    pub knowledge_results: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            coder: CoderConfig::default(),
            policy: PushPolicyConfig::default(),
            matching: MatchConfig::default(),
            recent_codes: DEFAULT_RECENT_CODES,
            query_terms: 3,
            knowledge_results: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SessionState {
    pub events: Vec<TraceEvent>,
    pub log: PushLog,
}

/// Event-driven recommender shared by batch replay and the service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecommenderEngine {
    pub config: EngineConfig,
    pub library: Vec<ShareFlow>,
    #[serde(skip)]
    pub index: Option<KnowledgeIndex>,
    pub tasks: Vec<TaskDescriptor>,
    pub sessions: BTreeMap<String, SessionState>,
}

impl RecommenderEngine {
    pub fn new(
        config: EngineConfig,
        library: Vec<ShareFlow>,
        index: Option<KnowledgeIndex>,
        tasks: Vec<TaskDescriptor>,
    ) -> Self {
        RecommenderEngine {
            config,
            library,
            index,
            tasks,
            sessions: BTreeMap::new(),
        }
    }

    pub fn shareflow(&self, id: &str) -> Option<&ShareFlow> {
        self.library.iter().find(|s| s.id == id)
    }

    pub fn log(&self, session_id: &str) -> Option<&PushLog> {
        self.sessions.get(session_id).map(|s| &s.log)
    }

    /// Every recommendation across sessions, ordered by session id then issue order.
    pub fn push_log(&self) -> Vec<Recommendation> {
        self.sessions.values().flat_map(|s| s.log.entries.iter().cloned()).collect()
    }

    fn expire(log: &mut PushLog, now: Millis, window: Millis) {
        for rec in log.entries.iter_mut() {
            if rec.status == Status::Delivered {
                let delivered = rec.delivered_ts.unwrap_or(rec.issued_ts);
                if now - delivered > window {
                    rec.transition(Status::Expired, delivered + window);
                }
            }
        }
    }

    /// Processes one event; returns the recommendations it produced
    /// (delivered pushes and suppressions).
    pub fn on_event(&mut self, event: TraceEvent) -> Vec<Recommendation> {
        let window = self.config.coder.interaction_window;
        let state = self
            .sessions
            .entry(event.session_id.clone())
            .or_insert_with(|| SessionState {
                events: Vec::new(),
                log: PushLog::new(&event.session_id),
            });
        state.events.push(event.clone());
        Self::expire(&mut state.log, event.ts, window);

        if event.action == Action::PopupClick {
            let target = event.rec_id().map(str::to_string).or_else(|| {
                state
                    .log
                    .entries
                    .iter()
                    .rev()
                    .find(|r| r.status == Status::Delivered)
                    .map(|r| r.id.clone())
            });
            if let Some(id) = target {
                let _ = record_interaction(&mut state.log, &id, &event, window);
            }
            return Vec::new();
        }
        if !event.action.is_page_action() {
            return Vec::new();
        }

        let Ok(ctx) = detect_context(
            &state.events,
            &self.config.coder,
            &self.tasks,
            self.config.recent_codes,
        ) else {
            return Vec::new();
        };
        let adjust = self
            .config
            .policy
            .expertise_adjustment
            .get(&ctx.expertise)
            .copied()
            .unwrap_or(0.0);
        let mut candidates = Vec::new();
        let flows = match_shareflows(&ctx, &self.library, &self.config.coder, &self.config.matching);
        if let Some(top) = flows.first() {
            candidates.push(PushCandidate {
                kind: RecommendationKind::ShareflowPush,
                payload: Payload::Shareflow(top.flow_id.clone()),
                score: top.score + adjust,
            });
        }
        if event.action == Action::Navigation {
            if let Some(c) = self.knowledge_candidate(&ctx) {
                candidates.push(PushCandidate { score: c.score + adjust, ..c });
            }
        }
        let state = self.sessions.get_mut(&event.session_id).expect("state inserted above");
        let mut issued = decide_push(&candidates, &state.log, &self.config.policy, event.ts);
        for rec in issued.iter_mut() {
            if rec.status == Status::Queued {
                rec.transition(Status::Delivered, event.ts);
            }
        }
        state.log.entries.extend(issued.iter().cloned());
        issued
    }

    fn knowledge_candidate(&self, ctx: &ContextDescriptor) -> Option<PushCandidate> {
        let index = self.index.as_ref()?;
        let query = synthesize_query(&ctx.page_terms, self.config.query_terms).ok()?;
        let results = index.search(&query, self.config.knowledge_results).ok()?;
        let top = results.first()?;
        let asked = tokenize(&query).len().max(1);
        Some(PushCandidate {
            kind: RecommendationKind::KnowledgePush,
            score: top.matched_terms.len() as f64 / asked as f64,
            payload: Payload::Knowledge(results),
        })
    }

    /// Popup acknowledgement for a known recommendation id.
    pub fn ack(&mut self, rec_id: &str, ts: Option<Millis>) -> Result<Recommendation, RecommenderError> {
        let unknown = || RecommenderError::UnknownRecommendation(rec_id.to_string());
        let session_id = self
            .sessions
            .iter()
            .find(|(_, s)| s.log.get(rec_id).is_some())
            .map(|(k, _)| k.clone())
            .ok_or_else(unknown)?;
        let state = self.sessions.get_mut(&session_id).ok_or_else(unknown)?;
        let template = state.events.last().cloned().ok_or_else(unknown)?;
        let mut payload = Map::new();
        payload.insert("rec".into(), Value::String(rec_id.to_string()));
        let event = TraceEvent {
            ts: ts.unwrap_or(template.ts),
            action: Action::PopupClick,
            target: None,
            payload: Some(payload),
            ..template
        };
        Self::expire(&mut state.log, event.ts, self.config.coder.interaction_window);
        state.events.push(event.clone());
        record_interaction(&mut state.log, rec_id, &event, self.config.coder.interaction_window)
    }

    /// Resolves every still-delivered recommendation whose window has passed by `now`.
    pub fn finish(&mut self, now: Millis) {
        let window = self.config.coder.interaction_window;
        for state in self.sessions.values_mut() {
            Self::expire(&mut state.log, now, window);
        }
    }
}

/// Feeds a corpus through the engine in session order and returns the push log.
pub fn replay_corpus(engine: &mut RecommenderEngine, corpus: &Corpus) -> Vec<Recommendation> {
    for s in &corpus.sessions {
        for ev in &s.events {
            engine.on_event(ev.clone());
        }
    }
    engine.push_log()
}

/// The session's events with the pushes from its log spliced in, plus a
/// popup click for every interaction not already present in the trace.
pub fn augment_trace(events: &[TraceEvent], log: &PushLog) -> Vec<TraceEvent> {
    let Some(template) = events.first() else {
        return Vec::new();
    };
    let present: BTreeSet<&str> = events
        .iter()
        .filter(|e| e.action == Action::PopupClick)
        .filter_map(TraceEvent::rec_id)
        .collect();
    let mut extra: Vec<TraceEvent> = Vec::new();
    for rec in log.entries.iter().filter(|r| r.is_pushed()) {
        let mut payload = Map::new();
        payload.insert("rec".into(), Value::String(rec.id.clone()));
        let action = match rec.kind {
            RecommendationKind::ShareflowPush => Action::PushShareflow,
            RecommendationKind::KnowledgePush => Action::PushKnowledge,
        };
        extra.push(TraceEvent {
            ts: rec.issued_ts,
            action,
            target: None,
            payload: Some(payload.clone()),
            ..template.clone()
        });
        if rec.status == Status::Interacted && !present.contains(rec.id.as_str()) {
            extra.push(TraceEvent {
                ts: rec.resolved_ts.unwrap_or(rec.issued_ts),
                action: Action::PopupClick,
                target: None,
                payload: Some(payload),
                ..template.clone()
            });
        }
    }
    // Inserted events go after every original event with the same timestamp.
    let mut merged: Vec<(Millis, u8, usize, TraceEvent)> = events
        .iter()
        .enumerate()
        .map(|(i, e)| (e.ts, 0, i, e.clone()))
        .collect();
    merged.extend(extra.into_iter().enumerate().map(|(i, e)| (e.ts, 1, i, e)));
    merged.sort_by_key(|m| (m.0, m.1, m.2));
    merged.into_iter().map(|(_, _, _, e)| e).collect()
}
