use std::sync::Arc;
use std::thread;

use kflow_core::repository::{tokenize, Document, KnowledgeIndex, SharedIndex};
use proptest::prelude::*;

const VOCAB: [&str; 8] = ["quiz", "grade", "weight", "rubric", "moodle", "exam", "publish", "category"];

fn doc(id: usize, words: &[&str]) -> Document {
    Document {
        id: format!("d{id:03}"),
        title: words.first().copied().unwrap_or("untitled").to_string(),
        body: words.join(" "),
        source_system: "wiki".into(),
        url: String::new(),
        tags: Vec::new(),
    }
}

fn arb_docs() -> impl Strategy<Value = Vec<Document>> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 1..12), 1..25)
        .prop_map(|ds| ds.iter().enumerate().map(|(i, w)| doc(i, w)).collect())
}

fn arb_query() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 1..4).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn results_always_contain_a_query_term(docs in arb_docs(), q in arb_query()) {
        let idx = KnowledgeIndex::build(docs.clone()).unwrap();
        let terms = tokenize(&q);
        for r in idx.search(&q, 50).unwrap() {
            let d = docs.iter().find(|d| d.id == r.doc_id).unwrap();
            let words = tokenize(&format!("{} {}", d.title, d.body));
            prop_assert!(terms.iter().any(|t| words.contains(t)));
            prop_assert!(!r.matched_terms.is_empty());
        }
    }

    #[test]
    fn irrelevant_documents_keep_relative_order(docs in arb_docs(), q in arb_query()) {
        let before = KnowledgeIndex::build(docs.clone()).unwrap().search(&q, 100).unwrap();
        let mut more = docs;
        more.push(Document { id: "zz-noise".into(), title: "unrelated".into(), body: "lecture timetable".into(), ..doc(0, &[]) });
        let after = KnowledgeIndex::build(more).unwrap().search(&q, 100).unwrap();
        let ids = |rs: &[kflow_core::repository::SearchResult]| rs.iter().map(|r| r.doc_id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&before), ids(&after));
    }

    #[test]
    fn ingestion_order_does_not_matter(docs in arb_docs(), q in arb_query(), seed in any::<u64>()) {
        let batch = KnowledgeIndex::build(docs.clone()).unwrap();
        let mut shuffled = docs;
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
        }
        let mut incremental = KnowledgeIndex::new();
        for d in shuffled {
            incremental.ingest(d).unwrap();
        }
        prop_assert_eq!(&batch, &incremental);
        prop_assert_eq!(batch.search(&q, 10).unwrap(), incremental.search(&q, 10).unwrap());
    }
}

#[test]
fn readers_see_whole_snapshots_during_writes() {
    let shared = Arc::new(SharedIndex::new(KnowledgeIndex::new()));
    let writer = {
        let s = Arc::clone(&shared);
        thread::spawn(move || {
            for i in 0..200 {
                s.ingest(doc(i, &["quiz", "grade"])).unwrap();
            }
        })
    };
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let s = Arc::clone(&shared);
            thread::spawn(move || {
                for _ in 0..200 {
                    let snap = s.snapshot();
                    // Every indexed document is fully posted under both terms.
                    assert_eq!(snap.doc_frequency("quiz"), snap.len());
                    assert_eq!(snap.doc_frequency("grade"), snap.len());
                }
            })
        })
        .collect();
    writer.join().unwrap();
    readers.into_iter().for_each(|r| r.join().unwrap());
    assert_eq!(shared.snapshot().len(), 200);
}
