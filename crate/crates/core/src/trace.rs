//! Trace-event data model: parsing, validation and segmentation of
//! line-delimited interaction logs.
//!
//! One record per line, encoded as a JSON object with the fields
//! `ts`, `session`, `participant`, `role`, `expertise`, `condition`, `task`,
//! `action`, `url` and the optional `target` and `payload`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Milliseconds since the Unix epoch.
pub type Millis = i64;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("input is not line-delimited UTF-8 text: {0}")]
    UnreadableInput(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("max_gap must be positive, got {0} ms")]
    NonPositiveGap(Millis),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tutor,
    Lecturer,
    ChiefExaminer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expertise {
    Novice,
    Journeyman,
    Expert,
}

/// Closed vocabulary of interaction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Navigation,
    Scroll,
    Click,
    Type,
    Select,
    Submit,
    Query,
    Response,
    PushShareflow,
    PushKnowledge,
    PopupClick,
}

impl Action {
    pub const ALL: [Action; 11] = [
        Action::Navigation,
        Action::Scroll,
        Action::Click,
        Action::Type,
        Action::Select,
        Action::Submit,
        Action::Query,
        Action::Response,
        Action::PushShareflow,
        Action::PushKnowledge,
        Action::PopupClick,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Navigation => "navigation",
            Action::Scroll => "scroll",
            Action::Click => "click",
            Action::Type => "type",
            Action::Select => "select",
            Action::Submit => "submit",
            Action::Query => "query",
            Action::Response => "response",
            Action::PushShareflow => "push_shareflow",
            Action::PushKnowledge => "push_knowledge",
            Action::PopupClick => "popup_click",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// Events emitted by the system rather than the user.
    pub fn is_system(self) -> bool {
        matches!(
            self,
            Action::Response | Action::PushShareflow | Action::PushKnowledge
        )
    }

    /// Direct user actions on a page (queries and popup acknowledgements excluded).
    pub fn is_page_action(self) -> bool {
        matches!(
            self,
            Action::Navigation
                | Action::Scroll
                | Action::Click
                | Action::Type
                | Action::Select
                | Action::Submit
        )
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub ts: Millis,
    #[serde(rename = "session")]
    pub session_id: String,
    #[serde(rename = "participant")]
    pub participant_id: String,
    pub role: Role,
    pub expertise: Expertise,
    pub condition: String,
    #[serde(rename = "task")]
    pub task_id: String,
    pub action: Action,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Map<String, Value>>,
}

impl TraceEvent {
    pub fn key(&self) -> SessionKey {
        SessionKey::new(&self.participant_id, &self.task_id, &self.condition)
    }

    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.as_ref()?.get(key)?.as_str()
    }

    /// Query text carried by `query` events.
    pub fn query_text(&self) -> Option<&str> {
        self.payload_str("text")
    }

    /// Weighted page terms carried in `payload.terms` (`{term: weight}`).
    pub fn page_terms(&self) -> Vec<(String, f64)> {
        let Some(terms) = self
            .payload
            .as_ref()
            .and_then(|p| p.get("terms"))
            .and_then(Value::as_object)
        else {
            return Vec::new();
        };
        terms
            .iter()
            .filter_map(|(k, v)| v.as_f64().map(|w| (k.clone(), w)))
            .collect()
    }

    /// Recommendation id carried by push and popup events.
    pub fn rec_id(&self) -> Option<&str> {
        self.payload_str("rec")
    }

    pub fn check(&self) -> Result<(), String> {
        if self.ts < 0 {
            return Err(format!("negative timestamp {}", self.ts));
        }
        if self.session_id.is_empty() {
            return Err("empty session id".into());
        }
        if self.action == Action::Query && self.query_text().is_none_or(|t| t.trim().is_empty()) {
            return Err("query event without payload text".into());
        }
        Ok(())
    }
}

/// Identity of a session: participant × task × condition, plus a segment
/// suffix assigned by [`segment_sessions`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub participant_id: String,
    pub task_id: String,
    pub condition: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub part: String,
}

impl SessionKey {
    pub fn new(participant: &str, task: &str, condition: &str) -> Self {
        SessionKey {
            participant_id: participant.to_string(),
            task_id: task.to_string(),
            condition: condition.to_string(),
            part: String::new(),
        }
    }

    fn with_part(&self, index: usize) -> Self {
        let part = if self.part.is_empty() {
            index.to_string()
        } else {
            format!("{}.{index}", self.part)
        };
        SessionKey {
            part,
            ..self.clone()
        }
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.participant_id, self.task_id, self.condition)?;
        if !self.part.is_empty() {
            write!(f, "#{}", self.part)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub key: SessionKey,
    pub events: Vec<TraceEvent>,
    pub outcome: Outcome,
    /// Rank of this session's condition in the participant's condition order (0 = first).
    pub order_index: u32,
}

impl Session {
    pub fn session_id(&self) -> &str {
        self.events.first().map_or("", |e| e.session_id.as_str())
    }

    pub fn expertise(&self) -> Option<Expertise> {
        self.events.first().map(|e| e.expertise)
    }

    pub fn start_ts(&self) -> Option<Millis> {
        self.events.first().map(|e| e.ts)
    }

    pub fn end_ts(&self) -> Option<Millis> {
        self.events.last().map(|e| e.ts)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub source: String,
}

impl Corpus {
    /// Builds a corpus from loose events: groups by session key, orders
    /// each session by timestamp (stable) and assigns condition order.
    pub fn from_events(events: Vec<TraceEvent>, source: impl Into<String>) -> Corpus {
        let mut grouped: BTreeMap<SessionKey, Vec<TraceEvent>> = BTreeMap::new();
        for ev in events {
            grouped.entry(ev.key()).or_default().push(ev);
        }
        let sessions = grouped
            .into_iter()
            .map(|(key, mut events)| {
                events.sort_by_key(|e| e.ts);
                Session {
                    key,
                    events,
                    outcome: Outcome::Unknown,
                    order_index: 0,
                }
            })
            .collect();
        let mut corpus = Corpus {
            sessions,
            source: source.into(),
        };
        corpus.assign_condition_order();
        corpus
    }

    /// Ranks each participant's conditions by first use.
    pub fn assign_condition_order(&mut self) {
        let mut first_use: BTreeMap<(String, String), Millis> = BTreeMap::new();
        for s in &self.sessions {
            if let Some(ts) = s.start_ts() {
                let k = (s.key.participant_id.clone(), s.key.condition.clone());
                first_use
                    .entry(k)
                    .and_modify(|t| *t = (*t).min(ts))
                    .or_insert(ts);
            }
        }
        let mut ranks: BTreeMap<String, Vec<(Millis, String)>> = BTreeMap::new();
        for ((p, c), ts) in first_use {
            ranks.entry(p).or_default().push((ts, c));
        }
        for list in ranks.values_mut() {
            list.sort();
        }
        for s in &mut self.sessions {
            if let Some(list) = ranks.get(&s.key.participant_id) {
                if let Some(pos) = list.iter().position(|(_, c)| *c == s.key.condition) {
                    s.order_index = pos as u32;
                }
            }
        }
    }

    pub fn event_count(&self) -> usize {
        self.sessions.iter().map(|s| s.events.len()).sum()
    }

    pub fn session(&self, key: &SessionKey) -> Option<&Session> {
        self.sessions.iter().find(|s| &s.key == key)
    }

    pub fn session_by_id(&self, id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.session_id() == id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Abort on the first malformed line instead of collecting diagnostics.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub corpus: Corpus,
    pub diagnostics: Vec<Diagnostic>,
}

const KNOWN_FIELDS: [&str; 11] = [
    "ts",
    "session",
    "participant",
    "role",
    "expertise",
    "condition",
    "task",
    "action",
    "url",
    "target",
    "payload",
];

fn parse_line(line: &str, strict: bool) -> Result<TraceEvent, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid record: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    if let Some(action) = obj.get("action").and_then(Value::as_str) {
        if Action::parse(action).is_none() {
            return Err(format!("unknown action \"{action}\""));
        }
    }
    if strict {
        if let Some(extra) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
            return Err(format!("unknown field \"{extra}\""));
        }
    }
    let event: TraceEvent = serde_json::from_value(value).map_err(|e| e.to_string())?;
    event.check()?;
    Ok(event)
}

/// Parses a trace log into a corpus.
///
/// In lenient mode malformed lines are excluded and reported in
/// `diagnostics`; in strict mode the first one aborts with its line number.
/// Blank lines are ignored.
pub fn parse_trace_log(
    bytes: &[u8],
    source: &str,
    opts: ParseOptions,
) -> Result<ParsedLog, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::UnreadableInput(e.to_string()))?;
    if text.contains('\0') {
        return Err(TraceError::UnreadableInput("NUL byte in input".into()));
    }
    let mut events = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match parse_line(line, opts.strict) {
            Ok(ev) => events.push(ev),
            Err(reason) if opts.strict => {
                return Err(TraceError::Malformed { line: i + 1, reason })
            }
            Err(reason) => diagnostics.push(Diagnostic { line: i + 1, reason }),
        }
    }
    Ok(ParsedLog {
        corpus: Corpus::from_events(events, source),
        diagnostics,
    })
}

/// Serializes a corpus back to the line-delimited format, session by session.
pub fn write_trace_log(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.sessions {
        for ev in &s.events {
            out.push_str(&serde_json::to_string(ev).expect("trace events always serialize"));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonMonotoneTimestamp { session: String, index: usize },
    DuplicateKey { session: String },
    EmptySession { session: String },
    ForeignEvent { session: String, index: usize },
    InvalidEvent { session: String, index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_corpus(c: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &c.sessions {
        let name = s.key.to_string();
        if !seen.insert(&s.key) {
            violations.push(Violation::DuplicateKey { session: name.clone() });
        }
        if s.events.is_empty() {
            violations.push(Violation::EmptySession { session: name.clone() });
        }
        for (i, ev) in s.events.iter().enumerate() {
            let k = ev.key();
            if k.participant_id != s.key.participant_id
                || k.task_id != s.key.task_id
                || k.condition != s.key.condition
            {
                violations.push(Violation::ForeignEvent { session: name.clone(), index: i });
            }
            if let Err(reason) = ev.check() {
                violations.push(Violation::InvalidEvent { session: name.clone(), index: i, reason });
            }
            if i > 0 && ev.ts < s.events[i - 1].ts {
                violations.push(Violation::NonMonotoneTimestamp { session: name.clone(), index: i });
            }
        }
    }
    ValidationReport { violations }
}

/// Splits sessions at every gap strictly longer than `max_gap` ms.
/// Split pieces get a numeric segment suffix on their key; sessions that
/// need no split are returned untouched, so the operation is idempotent.
pub fn segment_sessions(c: &Corpus, max_gap: Millis) -> Result<Corpus, TraceError> {
    if max_gap <= 0 {
        return Err(TraceError::NonPositiveGap(max_gap));
    }
    let mut sessions = Vec::with_capacity(c.sessions.len());
    for s in &c.sessions {
        let mut pieces: Vec<Vec<TraceEvent>> = vec![Vec::new()];
        for ev in &s.events {
            let current = pieces.last_mut().expect("pieces is never empty");
            if let Some(prev) = current.last() {
                if ev.ts - prev.ts > max_gap {
                    pieces.push(vec![ev.clone()]);
                    continue;
                }
            }
            current.push(ev.clone());
        }
        if pieces.len() == 1 {
            sessions.push(s.clone());
            continue;
        }
        for (i, events) in pieces.into_iter().enumerate() {
            sessions.push(Session {
                key: s.key.with_part(i + 1),
                events,
                outcome: s.outcome,
                order_index: s.order_index,
            });
        }
    }
    Ok(Corpus {
        sessions,
        source: c.source.clone(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn event(ts: Millis, action: Action, url: &str) -> TraceEvent {
        TraceEvent {
            ts,
            session_id: "s1".into(),
            participant_id: "p1".into(),
            role: Role::Tutor,
            expertise: Expertise::Novice,
            condition: "goldmind".into(),
            task_id: "t1".into(),
            action,
            url: url.into(),
            target: None,
            payload: None,
        }
    }

    fn line(ts: i64, action: &str) -> String {
        format!(
            r#"{{"ts":{ts},"session":"s1","participant":"p1","role":"tutor","expertise":"novice","condition":"goldmind","task":"t1","action":"{action}","url":"https://lms/x"}}"#
        )
    }

    #[test]
    fn three_lines_one_session() {
        let log = [line(3, "click"), line(1, "navigation"), line(2, "scroll")].join("\n");
        let parsed = parse_trace_log(log.as_bytes(), "t", ParseOptions::default()).unwrap();
        assert_eq!(parsed.corpus.sessions.len(), 1);
        let ts: Vec<_> = parsed.corpus.sessions[0].events.iter().map(|e| e.ts).collect();
        assert_eq!(ts, vec![1, 2, 3]);
        assert!(parsed.diagnostics.is_empty());
        assert!(validate_corpus(&parsed.corpus).is_clean());
    }

    #[test]
    fn empty_input() {
        let parsed = parse_trace_log(b"", "t", ParseOptions::default()).unwrap();
        assert!(parsed.corpus.sessions.is_empty());
    }

    #[test]
    fn unknown_action_is_reported() {
        let log = [line(1, "click"), line(2, "hover")].join("\n");
        let parsed = parse_trace_log(log.as_bytes(), "t", ParseOptions::default()).unwrap();
        assert_eq!(parsed.corpus.event_count(), 1);
        assert_eq!(parsed.diagnostics.len(), 1);
        assert_eq!(parsed.diagnostics[0].line, 2);
        assert!(parsed.diagnostics[0].reason.contains("unknown action"));

        let err = parse_trace_log(log.as_bytes(), "t", ParseOptions { strict: true }).unwrap_err();
        assert!(matches!(err, TraceError::Malformed { line: 2, .. }));
    }

    #[test]
    fn unknown_fields_only_rejected_when_strict() {
        let l = line(1, "click").replace("\"ts\"", "\"extra\":1,\"ts\"");
        assert!(parse_trace_log(l.as_bytes(), "t", ParseOptions::default()).unwrap().diagnostics.is_empty());
        assert!(parse_trace_log(l.as_bytes(), "t", ParseOptions { strict: true }).is_err());
    }

    #[test]
    fn query_without_text_is_malformed() {
        let parsed = parse_trace_log(line(1, "query").as_bytes(), "t", ParseOptions::default()).unwrap();
        assert_eq!(parsed.diagnostics.len(), 1);
    }

    #[test]
    fn non_utf8_is_unreadable() {
        let err = parse_trace_log(&[0xff, 0xfe, 0x00], "t", ParseOptions::default()).unwrap_err();
        assert!(matches!(err, TraceError::UnreadableInput(_)));
    }

    #[test]
    fn duplicate_keys_and_non_monotone() {
        let s = Session {
            key: SessionKey::new("p1", "t1", "goldmind"),
            events: vec![event(5, Action::Click, "u"), event(3, Action::Click, "u")],
            outcome: Outcome::Unknown,
            order_index: 0,
        };
        let c = Corpus { sessions: vec![s.clone(), s], source: String::new() };
        let report = validate_corpus(&c);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateKey { .. })));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::NonMonotoneTimestamp { index: 1, .. })));
    }

    #[test]
    fn segmentation() {
        let min = 60_000;
        let events = vec![
            event(0, Action::Navigation, "u"),
            event(10 * min, Action::Click, "u"),
            event(130 * min, Action::Click, "u"),
        ];
        let c = Corpus::from_events(events, "t");
        let same = segment_sessions(&c, 200 * min).unwrap();
        assert_eq!(same, c);
        let split = segment_sessions(&c, 30 * min).unwrap();
        assert_eq!(split.sessions.len(), 2);
        assert_eq!(split.sessions[0].key.part, "1");
        assert_eq!(split.sessions[1].events.len(), 1);
        assert!(validate_corpus(&split).is_clean());
        assert_eq!(segment_sessions(&split, 30 * min).unwrap(), split);
        assert_eq!(segment_sessions(&c, 0), Err(TraceError::NonPositiveGap(0)));
    }

    #[test]
    fn condition_order() {
        let mut a = event(100, Action::Click, "u");
        a.condition = "baseline".into();
        let b = event(500, Action::Click, "u");
        let c = Corpus::from_events(vec![b, a], "t");
        let base = c.sessions.iter().find(|s| s.key.condition == "baseline").unwrap();
        let gold = c.sessions.iter().find(|s| s.key.condition == "goldmind").unwrap();
        assert_eq!((base.order_index, gold.order_index), (0, 1));
    }
}
