//! Maps interaction-event subsequences onto knowledge-management
//! sub-process codes.
//!
//! Coding is a greedy left-to-right scan. At each position the patterns are
//! tried in precedence order (longest first by default) and the first match
//! consumes its events. Push events pair with the first later `popup_click`
//! inside the interaction window; unpaired pushes code as the
//! no-interaction variant.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::{Action, Corpus, Millis, Outcome, Session, TraceEvent};

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KmCode {
    AP1_SearchExplore,
    AP2_SwitchTabs,
    AP3_ReadEngage,
    AP4_OpenInteract,
    SP1_TypeInteract,
    SP2_SelectType,
    SP3_TypeDriven,
    SP4_OpenType,
    ShP1_ShareResource,
    SFPush_WithInteraction,
    SFPush_NoInteraction,
    KPush_WithInteraction,
    KPush_NoInteraction,
    Querying,
}

/// The four knowledge-management process families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmFamily {
    Access,
    Store,
    Share,
    Apply,
}

impl KmCode {
    pub const ALL: [KmCode; 14] = [
        KmCode::AP1_SearchExplore,
        KmCode::AP2_SwitchTabs,
        KmCode::AP3_ReadEngage,
        KmCode::AP4_OpenInteract,
        KmCode::SP1_TypeInteract,
        KmCode::SP2_SelectType,
        KmCode::SP3_TypeDriven,
        KmCode::SP4_OpenType,
        KmCode::ShP1_ShareResource,
        KmCode::SFPush_WithInteraction,
        KmCode::SFPush_NoInteraction,
        KmCode::KPush_WithInteraction,
        KmCode::KPush_NoInteraction,
        KmCode::Querying,
    ];

    pub fn family(self) -> KmFamily {
        use KmCode::*;
        match self {
            AP1_SearchExplore | AP2_SwitchTabs | AP3_ReadEngage | AP4_OpenInteract | Querying => {
                KmFamily::Access
            }
            SP1_TypeInteract | SP2_SelectType | SP3_TypeDriven | SP4_OpenType => KmFamily::Store,
            ShP1_ShareResource => KmFamily::Share,
            SFPush_WithInteraction | SFPush_NoInteraction | KPush_WithInteraction
            | KPush_NoInteraction => KmFamily::Apply,
        }
    }

    pub fn name(self) -> &'static str {
        use KmCode::*;
        match self {
            AP1_SearchExplore => "AP1_SearchExplore",
            AP2_SwitchTabs => "AP2_SwitchTabs",
            AP3_ReadEngage => "AP3_ReadEngage",
            AP4_OpenInteract => "AP4_OpenInteract",
            SP1_TypeInteract => "SP1_TypeInteract",
            SP2_SelectType => "SP2_SelectType",
            SP3_TypeDriven => "SP3_TypeDriven",
            SP4_OpenType => "SP4_OpenType",
            ShP1_ShareResource => "ShP1_ShareResource",
            SFPush_WithInteraction => "SFPush_WithInteraction",
            SFPush_NoInteraction => "SFPush_NoInteraction",
            KPush_WithInteraction => "KPush_WithInteraction",
            KPush_NoInteraction => "KPush_NoInteraction",
            Querying => "Querying",
        }
    }

    pub fn parse(s: &str) -> Option<KmCode> {
        KmCode::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn is_store(self) -> bool {
        self.family() == KmFamily::Store
    }
}

impl fmt::Display for KmCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Extra condition a pattern places on the events it matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    /// All matched events are on pairwise-distinct urls.
    DistinctUrls,
    /// All matched events share one url and span at least the dwell threshold.
    SameUrlDwell,
    /// Push followed by a popup click within the interaction window.
    PairedPopup,
    /// Push with no popup click within the interaction window.
    Unpaired,
    /// Query, optionally absorbing the immediately following response.
    WithResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Pattern {
    pub code: KmCode,
    pub actions: Vec<Action>,
    pub constraint: Constraint,
}

/// The canonical code → action-pattern mapping.
pub fn pattern_table() -> Vec<Pattern> {
    use Action::*;
    use KmCode::*;
    let p = |code, actions: &[Action], constraint| Pattern {
        code,
        actions: actions.to_vec(),
        constraint,
    };
    vec![
        p(AP1_SearchExplore, &[Navigation, Scroll, Click, Navigation], Constraint::None),
        p(AP2_SwitchTabs, &[Navigation, Navigation, Navigation], Constraint::DistinctUrls),
        p(AP3_ReadEngage, &[Click, Click], Constraint::SameUrlDwell),
        p(AP4_OpenInteract, &[Navigation, Click], Constraint::None),
        p(SP1_TypeInteract, &[Click, Click, Click, Click, Type], Constraint::None),
        p(SP2_SelectType, &[Select, Type], Constraint::None),
        p(SP3_TypeDriven, &[Type, Type], Constraint::SameUrlDwell),
        p(SP4_OpenType, &[Navigation, Click, Type], Constraint::None),
        p(ShP1_ShareResource, &[Submit], Constraint::None),
        p(SFPush_WithInteraction, &[PushShareflow, PopupClick], Constraint::PairedPopup),
        p(SFPush_NoInteraction, &[PushShareflow], Constraint::Unpaired),
        p(KPush_WithInteraction, &[PushKnowledge, PopupClick], Constraint::PairedPopup),
        p(KPush_NoInteraction, &[PushKnowledge], Constraint::Unpaired),
        p(Querying, &[Query], Constraint::WithResponse),
    ]
}

pub fn pattern_for(code: KmCode) -> Pattern {
    pattern_table()
        .into_iter()
        .find(|p| p.code == code)
        .expect("every code has a pattern")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoderConfig {
    /// Minimum span (ms) for the "for a period of time" patterns.
    pub dwell_threshold: Millis,
    /// Push → popup-click pairing window (ms).
    pub interaction_window: Millis,
    /// Order in which patterns are tried at each position.
    pub precedence: Vec<KmCode>,
}

impl CoderConfig {
    pub fn longest_first() -> Vec<KmCode> {
        let mut table = pattern_table();
        table.sort_by_key(|p| std::cmp::Reverse(p.actions.len()));
        table.into_iter().map(|p| p.code).collect()
    }

    pub fn check(&self) -> Result<(), String> {
        if self.dwell_threshold <= 0 || self.interaction_window <= 0 {
            return Err("coder durations must be positive".into());
        }
        for code in KmCode::ALL {
            if !self.precedence.contains(&code) {
                return Err(format!("precedence is missing {code}"));
            }
        }
        Ok(())
    }
}

impl Default for CoderConfig {
    fn default() -> Self {
        CoderConfig {
            dwell_threshold: 5_000,
            interaction_window: 30_000,
            precedence: Self::longest_first(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitKey {
    pub participant_id: String,
    pub task_id: String,
    pub condition: String,
}

impl fmt::Display for UnitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.participant_id, self.task_id, self.condition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConversationKey {
    pub condition: String,
    pub task_id: String,
}

impl fmt::Display for ConversationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.condition, self.task_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodedLine {
    pub unit: UnitKey,
    pub conversation: ConversationKey,
    pub line_index: usize,
    pub code: KmCode,
    /// Inclusive event-index range within the session.
    pub span: (usize, usize),
    /// Index of a popup click paired with a push outside the span, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired: Option<usize>,
    pub ts: Millis,
    /// Timestamp of the last event covered (span end or paired click).
    pub end_ts: Millis,
    pub outcome: Outcome,
    pub order_index: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionCoding {
    pub lines: Vec<CodedLine>,
    /// Events that matched no pattern.
    pub residual: usize,
}

struct Match {
    end: usize,
    paired: Option<usize>,
}

fn popup_partner(
    events: &[TraceEvent],
    consumed: &[bool],
    push: usize,
    window: Millis,
) -> Option<usize> {
    let push_ev = &events[push];
    for (j, ev) in events.iter().enumerate().skip(push + 1) {
        if ev.ts - push_ev.ts > window {
            break;
        }
        if ev.action != Action::PopupClick || consumed[j] {
            continue;
        }
        match (push_ev.rec_id(), ev.rec_id()) {
            (Some(a), Some(b)) if a != b => continue,
            _ => return Some(j),
        }
    }
    None
}

fn try_pattern(
    pattern: &Pattern,
    events: &[TraceEvent],
    consumed: &[bool],
    at: usize,
    cfg: &CoderConfig,
) -> Option<Match> {
    let first = pattern.actions[0];
    if events[at].action != first {
        return None;
    }
    match pattern.constraint {
        Constraint::PairedPopup => {
            let j = popup_partner(events, consumed, at, cfg.interaction_window)?;
            return Some(if j == at + 1 {
                Match { end: j, paired: None }
            } else {
                Match { end: at, paired: Some(j) }
            });
        }
        Constraint::Unpaired => {
            return popup_partner(events, consumed, at, cfg.interaction_window)
                .is_none()
                .then_some(Match { end: at, paired: None });
        }
        Constraint::WithResponse => {
            let end = match events.get(at + 1) {
                Some(next) if next.action == Action::Response && !consumed[at + 1] => at + 1,
                _ => at,
            };
            return Some(Match { end, paired: None });
        }
        _ => {}
    }
    let len = pattern.actions.len();
    let window = events.get(at..at + len)?;
    if consumed[at..at + len].iter().any(|&c| c) {
        return None;
    }
    if window.iter().zip(&pattern.actions).any(|(ev, a)| ev.action != *a) {
        return None;
    }
    let ok = match pattern.constraint {
        Constraint::DistinctUrls => {
            let mut urls: Vec<&str> = window.iter().map(|e| e.url.as_str()).collect();
            urls.sort_unstable();
            urls.dedup();
            urls.len() == window.len()
        }
        Constraint::SameUrlDwell => {
            window.iter().all(|e| e.url == window[0].url)
                && window[len - 1].ts - window[0].ts >= cfg.dwell_threshold
        }
        _ => true,
    };
    ok.then_some(Match { end: at + len - 1, paired: None })
}

/// Codes one session. Line indices start at 0; [`code_corpus`] renumbers
/// them per conversation.
pub fn code_session(s: &Session, cfg: &CoderConfig) -> SessionCoding {
    code_events(&s.events, cfg, s)
}

fn code_events(events: &[TraceEvent], cfg: &CoderConfig, s: &Session) -> SessionCoding {
    let table: BTreeMap<KmCode, Pattern> =
        pattern_table().into_iter().map(|p| (p.code, p)).collect();
    let order: Vec<&Pattern> = cfg.precedence.iter().filter_map(|c| table.get(c)).collect();
    let unit = UnitKey {
        participant_id: s.key.participant_id.clone(),
        task_id: s.key.task_id.clone(),
        condition: s.key.condition.clone(),
    };
    let conversation = ConversationKey {
        condition: s.key.condition.clone(),
        task_id: s.key.task_id.clone(),
    };
    let mut consumed = vec![false; events.len()];
    let mut out = SessionCoding::default();
    let mut i = 0;
    while i < events.len() {
        if consumed[i] {
            i += 1;
            continue;
        }
        let hit = order
            .iter()
            .find_map(|p| try_pattern(p, events, &consumed, i, cfg).map(|m| (p.code, m)));
        match hit {
            Some((code, m)) => {
                consumed[i..=m.end].iter_mut().for_each(|c| *c = true);
                if let Some(j) = m.paired {
                    consumed[j] = true;
                }
                let last = m.paired.unwrap_or(m.end).max(m.end);
                out.lines.push(CodedLine {
                    unit: unit.clone(),
                    conversation: conversation.clone(),
                    line_index: out.lines.len(),
                    code,
                    span: (i, m.end),
                    paired: m.paired,
                    ts: events[i].ts,
                    end_ts: events[last].ts,
                    outcome: s.outcome,
                    order_index: s.order_index,
                });
                i = m.end + 1;
            }
            None => {
                out.residual += 1;
                i += 1;
            }
        }
    }
    out
}

/// Codes an arbitrary event prefix as if it were a session of its own.
pub fn code_prefix(events: &[TraceEvent], cfg: &CoderConfig) -> SessionCoding {
    let Some(first) = events.first() else {
        return SessionCoding::default();
    };
    let shell = Session {
        key: first.key(),
        events: Vec::new(),
        outcome: Outcome::Unknown,
        order_index: 0,
    };
    code_events(events, cfg, &shell)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusCoding {
    pub lines: Vec<CodedLine>,
    pub residual: usize,
}

/// Codes every session in corpus order; line indices run per conversation
/// across sessions.
pub fn code_corpus(c: &Corpus, cfg: &CoderConfig) -> CorpusCoding {
    let mut next_index: BTreeMap<ConversationKey, usize> = BTreeMap::new();
    let mut out = CorpusCoding::default();
    for s in &c.sessions {
        let coded = code_session(s, cfg);
        out.residual += coded.residual;
        for mut line in coded.lines {
            let n = next_index.entry(line.conversation.clone()).or_insert(0);
            line.line_index = *n;
            *n += 1;
            out.lines.push(line);
        }
    }
    out
}

#[derive(Serialize)]
struct ExportLine<'a> {
    unit: String,
    conversation: String,
    line_index: usize,
    code: &'a str,
    ts: Millis,
}

/// Line-delimited export: one `{unit, conversation, line_index, code, ts}` record per line.
pub fn export_coded_lines(lines: &[CodedLine]) -> String {
    let mut out = String::new();
    for l in lines {
        let rec = ExportLine {
            unit: l.unit.to_string(),
            conversation: l.conversation.to_string(),
            line_index: l.line_index,
            code: l.code.name(),
            ts: l.ts,
        };
        out.push_str(&serde_json::to_string(&rec).expect("export record serializes"));
        out.push('\n');
    }
    out
}
