use kflow_core::miner::{
    dependency_measure, directly_follows, extract_main_flow, mine_dependency_graph, MinerConfig, StepLog,
};
use proptest::prelude::*;

fn toy() -> StepLog {
    let abc: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let ac: Vec<String> = ["a", "c"].map(String::from).to_vec();
    let mut traces = vec![abc; 10];
    traces.push(ac);
    StepLog::new(traces)
}

#[test]
fn toy_log_dependencies() {
    let t = directly_follows(&toy()).unwrap();
    // (|a>b| - |b>a|) / (|a>b| + |b>a| + 1)
    assert!((dependency_measure(&t, "a", "b") - 10.0 / 11.0).abs() < 1e-12);
    assert!((dependency_measure(&t, "a", "c") - 1.0 / 2.0).abs() < 1e-12);
    let g = mine_dependency_graph(&toy(), &MinerConfig::default()).unwrap();
    assert!(g.edge("a", "b").is_some());
    assert!(g.edge("a", "c").is_none());
    assert_eq!(extract_main_flow(&g).unwrap(), vec!["a", "b", "c"]);
}

fn arb_log() -> impl Strategy<Value = StepLog> {
    let label = prop::sample::select(vec!["s", "x", "y", "z", "e"]);
    prop::collection::vec(prop::collection::vec(label, 1..7), 1..12).prop_map(|ts| {
        StepLog::new(ts.into_iter().map(|t| t.into_iter().map(String::from).collect()).collect())
    })
}

proptest! {
    #[test]
    fn graph_invariants(log in arb_log(), threshold in 0.0f64..1.0) {
        let cfg = MinerConfig { dependency_threshold: threshold, ..MinerConfig::default() };
        let t = directly_follows(&log).unwrap();
        let g = mine_dependency_graph(&log, &cfg).unwrap();
        for e in &g.edges {
            prop_assert!(e.dependency > -1.0 && e.dependency < 1.0);
            prop_assert!(e.dependency >= threshold);
            prop_assert_eq!(e.count, t.get(&e.from, &e.to));
            prop_assert!(e.count >= 1);
        }
        // Raising the threshold only removes edges.
        let stricter = MinerConfig { dependency_threshold: (threshold + 0.2).min(1.0), ..cfg.clone() };
        let g2 = mine_dependency_graph(&log, &stricter).unwrap();
        prop_assert!(g2.edge_set().is_subset(&g.edge_set()));
        if let Ok(flow) = extract_main_flow(&g) {
            prop_assert!(g.starts.contains(&flow[0]));
            prop_assert!(g.ends.contains(flow.last().unwrap()));
            for w in flow.windows(2) {
                prop_assert!(g.edge(&w[0], &w[1]).is_some() || w[0] == w[1]);
            }
            let mut seen = std::collections::BTreeSet::new();
            prop_assert!(flow.iter().all(|l| seen.insert(l)));
        }
    }

    #[test]
    fn dependency_is_antisymmetric(log in arb_log()) {
        let t = directly_follows(&log).unwrap();
        for (a, b) in t.counts.keys() {
            if a != b {
                let s = dependency_measure(&t, a, b) + dependency_measure(&t, b, a);
                prop_assert!(s.abs() < 1e-12);
            }
        }
    }
}
