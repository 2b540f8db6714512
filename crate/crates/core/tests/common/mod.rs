#![allow(dead_code)]

use kflow_core::trace::{Action, Corpus, Expertise, Millis, Outcome, Role, Session, SessionKey, TraceEvent};
use serde_json::{Map, Value};

pub fn ev(session: &str, ts: Millis, action: Action, url: &str) -> TraceEvent {
    let mut parts = session.splitn(3, '-');
    let participant = parts.next().unwrap_or("p1").to_string();
    let task = parts.next().unwrap_or("t1").to_string();
    let condition = parts.next().unwrap_or("goldmind").to_string();
    TraceEvent {
        ts,
        session_id: session.to_string(),
        participant_id: participant,
        role: Role::Tutor,
        expertise: Expertise::Novice,
        condition,
        task_id: task,
        action,
        url: url.to_string(),
        target: None,
        payload: None,
    }
}

pub fn with_payload(mut e: TraceEvent, key: &str, value: Value) -> TraceEvent {
    e.payload.get_or_insert_with(Map::new).insert(key.to_string(), value);
    e
}

pub fn query(session: &str, ts: Millis, text: &str) -> TraceEvent {
    with_payload(ev(session, ts, Action::Query, "https://x/q"), "text", Value::String(text.into()))
}

pub fn session(events: Vec<TraceEvent>) -> Session {
    Session {
        key: events[0].key(),
        events,
        outcome: Outcome::Unknown,
        order_index: 0,
    }
}

pub fn corpus(events: Vec<TraceEvent>) -> Corpus {
    Corpus::from_events(events, "test")
}

pub fn key(p: &str, t: &str, c: &str) -> SessionKey {
    SessionKey::new(p, t, c)
}
