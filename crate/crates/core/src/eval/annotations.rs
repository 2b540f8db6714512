use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::trace::{Corpus, Millis, Outcome};

pub const MAX_RATING: u8 = 4;

/// Human judgements attached to sessions, keyed by session id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    /// Usefulness rating per query, indexed by the query's position in the session.
    pub relevance: BTreeMap<String, BTreeMap<usize, u8>>,
    /// Rubric quality in [0, 1].
    pub quality: BTreeMap<String, f64>,
    pub completed: BTreeMap<String, bool>,
    pub time_limit: BTreeMap<String, Millis>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    session: String,
    field: String,
    #[serde(default)]
    index: Option<usize>,
    value: String,
}

impl Annotations {
    pub fn rate(&mut self, session: &str, query: usize, rating: u8) {
        self.relevance.entry(session.to_string()).or_default().insert(query, rating);
    }

    pub fn check(&self) -> Result<(), EvalError> {
        for (s, ratings) in &self.relevance {
            if let Some((q, r)) = ratings.iter().find(|(_, &r)| r > MAX_RATING) {
                return Err(EvalError::InvalidAnnotation(format!("{s} query {q}: rating {r} > {MAX_RATING}")));
            }
        }
        for (s, &q) in &self.quality {
            if !(0.0..=1.0).contains(&q) {
                return Err(EvalError::InvalidAnnotation(format!("{s}: quality {q} outside [0, 1]")));
            }
        }
        for (s, &t) in &self.time_limit {
            if t <= 0 {
                return Err(EvalError::InvalidAnnotation(format!("{s}: non-positive time limit")));
            }
        }
        Ok(())
    }

    /// Failed when not completed, or when the session ran past its limit.
    /// `None` when completion is unannotated.
    pub fn failed(&self, session: &str, duration: Millis) -> Option<bool> {
        let done = *self.completed.get(session)?;
        let late = self.time_limit.get(session).is_some_and(|&l| duration > l);
        Some(!done || late)
    }

    /// Sets each session's outcome from the completion annotations.
    pub fn apply_outcomes(&self, corpus: &mut Corpus) {
        for s in &mut corpus.sessions {
            let duration = s.end_ts().unwrap_or(0) - s.start_ts().unwrap_or(0);
            s.outcome = match self.failed(s.session_id(), duration) {
                Some(false) => Outcome::Pass,
                Some(true) => Outcome::Fail,
                None => Outcome::Unknown,
            };
        }
    }

    /// Long-format table: `session,field,index,value`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |session: &str, field: &str, index: Option<usize>, value: String| {
            w.serialize(Row {
                session: session.to_string(),
                field: field.to_string(),
                index,
                value,
            })
            .expect("in-memory csv write");
        };
        for (s, ratings) in &self.relevance {
            for (&q, &r) in ratings {
                put(s, "relevance", Some(q), r.to_string());
            }
        }
        for (s, q) in &self.quality {
            put(s, "quality", None, format!("{q}"));
        }
        for (s, c) in &self.completed {
            put(s, "completed", None, c.to_string());
        }
        for (s, t) in &self.time_limit {
            put(s, "time_limit_ms", None, t.to_string());
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Annotations, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut out = Annotations::default();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = rec.map_err(|e| EvalError::Table(format!("row {line}: {e}")))?;
            let bad = |what: &str| EvalError::Table(format!("row {line}: bad {what} {:?}", row.value));
            match row.field.as_str() {
                "relevance" => {
                    let q = row
                        .index
                        .ok_or_else(|| EvalError::Table(format!("row {line}: relevance needs an index")))?;
                    let r = row.value.parse().map_err(|_| bad("rating"))?;
                    out.rate(&row.session, q, r);
                }
                "quality" => {
                    out.quality.insert(row.session.clone(), row.value.parse().map_err(|_| bad("quality"))?);
                }
                "completed" => {
                    let v = match row.value.to_ascii_lowercase().as_str() {
                        "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        _ => return Err(bad("completion flag")),
                    };
                    out.completed.insert(row.session.clone(), v);
                }
                "time_limit_ms" => {
                    out.time_limit.insert(row.session.clone(), row.value.parse().map_err(|_| bad("time limit"))?);
                }
                other => return Err(EvalError::Table(format!("row {line}: unknown field {other:?}"))),
            }
        }
        out.check()?;
        Ok(out)
    }
}
