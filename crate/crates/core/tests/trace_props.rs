mod common;

use kflow_core::trace::{
    parse_trace_log, segment_sessions, validate_corpus, write_trace_log, Action, ParseOptions, TraceEvent,
};
use proptest::prelude::*;

fn arb_event() -> impl Strategy<Value = TraceEvent> {
    let actions = prop::sample::select(
        Action::ALL.into_iter().filter(|a| *a != Action::Query).collect::<Vec<_>>(),
    );
    (0usize..3, 0usize..2, 0i64..5_000_000, actions, 0usize..4, prop::option::of("[a-z#]{1,6}")).prop_map(
        |(p, c, ts, action, u, target)| {
            let cond = ["goldmind", "baseline"][c];
            let mut e = common::ev(&format!("p{p}-t1-{cond}"), ts, action, &format!("https://lms/x/{u}"));
            e.target = target;
            e
        },
    )
}

proptest! {
    #[test]
    fn write_then_parse_is_identity(events in prop::collection::vec(arb_event(), 1..60)) {
        let c = common::corpus(events);
        let text = write_trace_log(&c);
        let parsed = parse_trace_log(text.as_bytes(), "test", ParseOptions { strict: true }).unwrap();
        prop_assert!(parsed.diagnostics.is_empty());
        prop_assert_eq!(&parsed.corpus, &c);
        prop_assert_eq!(write_trace_log(&parsed.corpus), text);
        prop_assert!(validate_corpus(&c).is_clean());
    }

    #[test]
    fn segmentation_is_idempotent_and_order_preserving(
        events in prop::collection::vec(arb_event(), 1..60),
        gap in 1i64..2_000_000,
    ) {
        let c = common::corpus(events);
        let once = segment_sessions(&c, gap).unwrap();
        let twice = segment_sessions(&once, gap).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.event_count(), c.event_count());
        for s in &once.sessions {
            for w in s.events.windows(2) {
                prop_assert!(w[1].ts - w[0].ts <= gap);
            }
        }
        let flat: Vec<_> = once.sessions.iter().flat_map(|s| s.events.iter().map(|e| e.ts)).collect();
        let orig: Vec<_> = c.sessions.iter().flat_map(|s| s.events.iter().map(|e| e.ts)).collect();
        prop_assert_eq!(flat, orig);
    }
}

#[test]
fn lenient_and_strict_modes() {
    let good = serde_json::to_string(&common::ev("p1-t1-goldmind", 1, Action::Click, "https://x/a")).unwrap();
    let text = format!("{good}\nnot json\n{{\"ts\":2}}\n");
    let lenient = parse_trace_log(text.as_bytes(), "t", ParseOptions::default()).unwrap();
    assert_eq!(lenient.corpus.event_count(), 1);
    assert_eq!(lenient.diagnostics.iter().map(|d| d.line).collect::<Vec<_>>(), vec![2, 3]);
    let strict = parse_trace_log(text.as_bytes(), "t", ParseOptions { strict: true }).unwrap_err();
    assert!(strict.to_string().contains('2'), "{strict}");
}
