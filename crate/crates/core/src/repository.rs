//! Knowledge repository: document ingestion from several source systems and
//! lexical retrieval behind the [`Retriever`] trait.
//!
//! Term weight is `(1 + ln tf) / (1 + ln len)` for the document side and
//! `1 / (1 + ln df)` for the corpus side. Neither depends on the corpus size
//! or mean document length, so adding a document that shares no term with a
//! query leaves that query's ranking untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SNAPSHOT_MAGIC: &str = "KFLOW-INDEX";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("document id {0:?} is already indexed")]
    DuplicateId(String),
    #[error("document {0:?} has neither title nor body")]
    EmptyDocument(String),
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Fixed stopword list shipped with the index so scores are reproducible.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how",
    "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my",
    "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
    "out", "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours",
];

pub fn is_stopword(term: &str) -> bool {
    STOPWORDS.binary_search(&term).is_ok()
}

/// Lowercases, splits on anything that is not alphanumeric and drops stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !is_stopword(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub source_system: String,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: String,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub id: String,
    pub title: String,
    pub url: String,
    pub source_system: String,
    pub length: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KnowledgeIndex {
    /// term → postings sorted by doc id.
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub docs: BTreeMap<String, DocEntry>,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub doc_id: String,
    pub score: f64,
    pub matched_terms: Vec<String>,
}

pub trait Retriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, RepositoryError>;
}

fn doc_weight(tf: u32, len: u32) -> f64 {
    (1.0 + (tf as f64).ln()) / (1.0 + (len.max(1) as f64).ln())
}

fn term_weight(df: usize) -> f64 {
    1.0 / (1.0 + (df.max(1) as f64).ln())
}

impl KnowledgeIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn build(docs: impl IntoIterator<Item = Document>) -> Result<Self, RepositoryError> {
        let mut idx = Self::new();
        for d in docs {
            idx.ingest(d)?;
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.docs.contains_key(id)
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Indexes title, body and tags together.
    pub fn ingest(&mut self, doc: Document) -> Result<(), RepositoryError> {
        if self.docs.contains_key(&doc.id) {
            return Err(RepositoryError::DuplicateId(doc.id));
        }
        if doc.title.trim().is_empty() && doc.body.trim().is_empty() {
            return Err(RepositoryError::EmptyDocument(doc.id));
        }
        let text = format!("{} {} {}", doc.title, doc.body, doc.tags.join(" "));
        let tokens = tokenize(&text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_insert(0) += 1;
        }
        for (term, count) in tf {
            let list = self.postings.entry(term).or_default();
            let pos = list.partition_point(|p| p.doc < doc.id);
            list.insert(pos, Posting { doc: doc.id.clone(), tf: count });
        }
        self.total_tokens += tokens.len() as u64;
        self.docs.insert(
            doc.id.clone(),
            DocEntry {
                id: doc.id,
                title: doc.title,
                url: doc.url,
                source_system: doc.source_system,
                length: tokens.len() as u32,
            },
        );
        Ok(())
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, RepositoryError> {
        if k == 0 {
            return Err(RepositoryError::InvalidK);
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        if terms.is_empty() {
            return Err(RepositoryError::EmptyQuery);
        }
        let mut acc: BTreeMap<&str, (f64, Vec<String>)> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = term_weight(list.len());
            for p in list {
                let len = self.docs[&p.doc].length;
                let e = acc.entry(p.doc.as_str()).or_insert((0.0, Vec::new()));
                e.0 += doc_weight(p.tf, len) * idf;
                e.1.push(term.clone());
            }
        }
        let mut results: Vec<SearchResult> = acc
            .into_iter()
            .map(|(id, (score, matched_terms))| SearchResult {
                doc_id: id.to_string(),
                score,
                matched_terms,
            })
            .collect();
        results.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        results.truncate(k);
        Ok(results)
    }

    pub fn to_snapshot(&self) -> String {
        format!(
            "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}\n{}\n",
            serde_json::to_string(self).expect("index serializes")
        )
    }

    pub fn from_snapshot(text: &str) -> Result<Self, RepositoryError> {
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| RepositoryError::Snapshot("missing header".into()))?;
        let version = header
            .strip_prefix(SNAPSHOT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| RepositoryError::Snapshot("not an index snapshot".into()))?;
        if version != SNAPSHOT_VERSION.to_string() {
            return Err(RepositoryError::Snapshot(format!("unsupported format version {version}")));
        }
        serde_json::from_str(body).map_err(|e| RepositoryError::Snapshot(e.to_string()))
    }
}

impl Retriever for KnowledgeIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, RepositoryError> {
        self.search(query, k)
    }
}

/// Many-reader, single-writer handle. Writers build a new index and swap
/// it in, so readers only ever see complete snapshots.
#[derive(Debug, Clone, Default)]
pub struct SharedIndex {
    current: Arc<RwLock<Arc<KnowledgeIndex>>>,
    writer: Arc<std::sync::Mutex<()>>,
}

impl SharedIndex {
    pub fn new(idx: KnowledgeIndex) -> Self {
        SharedIndex {
            current: Arc::new(RwLock::new(Arc::new(idx))),
            writer: Arc::default(),
        }
    }

    pub fn snapshot(&self) -> Arc<KnowledgeIndex> {
        self.current.read().expect("index lock poisoned").clone()
    }

    pub fn ingest(&self, doc: Document) -> Result<(), RepositoryError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let mut next = (*self.snapshot()).clone();
        next.ingest(doc)?;
        *self.current.write().expect("index lock poisoned") = Arc::new(next);
        Ok(())
    }
}

impl Retriever for SharedIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, RepositoryError> {
        self.snapshot().search(query, k)
    }
}

/// Reads every `*.json` document record in `dir` (sorted by file name).
/// A file may hold one record or an array of records.
pub fn load_documents(dir: &Path) -> Result<Vec<Document>, RepositoryError> {
    let io = |source| RepositoryError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut docs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|source| RepositoryError::Io {
            path: p.display().to_string(),
            source,
        })?;
        let bad = |e: serde_json::Error| RepositoryError::Snapshot(format!("{}: {e}", p.display()));
        if text.trim_start().starts_with('[') {
            docs.extend(serde_json::from_str::<Vec<Document>>(&text).map_err(bad)?);
        } else {
            docs.push(serde_json::from_str(&text).map_err(bad)?);
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, body: &str) -> Document {
        Document {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            source_system: "lms".into(),
            url: format!("https://kb/{id}"),
            tags: vec![],
        }
    }

    #[test]
    fn stopwords_sorted() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn tokenizer_contract() {
        let mut idx = KnowledgeIndex::new();
        idx.ingest(doc("d1", "", "Create Gradebook item")).unwrap();
        let terms: Vec<_> = idx.postings.keys().cloned().collect();
        assert_eq!(terms, vec!["create", "gradebook", "item"]);
        assert!(matches!(idx.ingest(doc("d1", "x", "")), Err(RepositoryError::DuplicateId(_))));
        idx.ingest(doc("d2", "Zoom setup", "")).unwrap();
        assert_eq!(idx.doc_frequency("zoom"), 1);
        assert_eq!(idx.doc_frequency("setup"), 1);
    }

    #[test]
    fn unique_term_ranking() {
        let idx = KnowledgeIndex::build([
            doc("d1", "", "zoom lecture"),
            doc("d2", "", "gradebook item"),
            doc("d3", "", "moodle forum"),
        ])
        .unwrap();
        let r = idx.search("gradebook", 3).unwrap();
        assert_eq!(r[0].doc_id, "d2");
        assert_eq!(r.len(), 1);
        assert!(matches!(idx.search("the and of", 3), Err(RepositoryError::EmptyQuery)));
        assert!(matches!(idx.search("zoom", 0), Err(RepositoryError::InvalidK)));
    }

    #[test]
    fn tie_break_by_id() {
        let idx = KnowledgeIndex::build([doc("b", "", "forum post"), doc("a", "", "forum post")]).unwrap();
        let r = idx.search("forum", 2).unwrap();
        assert_eq!(r[0].score, r[1].score);
        assert_eq!((r[0].doc_id.as_str(), r[1].doc_id.as_str()), ("a", "b"));
    }

    #[test]
    fn snapshot_round_trip() {
        let idx = KnowledgeIndex::build([doc("d1", "Zoom", "lecture recording")]).unwrap();
        let text = idx.to_snapshot();
        assert!(text.starts_with("KFLOW-INDEX 1\n"));
        assert_eq!(KnowledgeIndex::from_snapshot(&text).unwrap(), idx);
        assert!(KnowledgeIndex::from_snapshot(&text.replace("INDEX 1", "INDEX 9")).is_err());
    }

    #[test]
    fn shared_index_swaps() {
        let shared = SharedIndex::new(KnowledgeIndex::new());
        let before = shared.snapshot();
        shared.ingest(doc("d1", "Zoom", "")).unwrap();
        assert!(before.is_empty());
        assert_eq!(shared.retrieve("zoom", 1).unwrap()[0].doc_id, "d1");
    }
}
