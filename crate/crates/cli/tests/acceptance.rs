//! Acceptance checks, one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kflow::{router, AppState, SessionRecommendations};
use kflow_core::coder::{code_session, CodedLine, CoderConfig, ConversationKey, KmCode, UnitKey};
use kflow_core::ena::{accumulate, build_model, pair_index, subtract_networks, EnaConfig};
use kflow_core::eval::{improvement, MetricId};
use kflow_core::miner::{dependency_measure, directly_follows, extract_main_flow, mine_dependency_graph, MinerConfig, StepLog};
use kflow_core::pipeline::{run_pipeline, PipelineConfig, MANIFEST_FILE};
use kflow_core::recommender::{
    EngineConfig, Payload, Recommendation, RecommenderEngine, Status, SuppressReason, TaskDescriptor,
};
use kflow_core::shareflow::ShareFlow;
use kflow_core::stats::{
    default_km_sus_groups, score_km_sus, score_sus, Instrument, SurveyResponse, fit_lmm, fit_lmm_with, fit_logistic, profile_log_likelihood, LmmOptions, Observation, RegressionSpec, StatsError,
    GRID_POINTS, LOG_LAMBDA_MAX, LOG_LAMBDA_MIN,
};
use kflow_core::trace::{
    parse_trace_log, Action, Expertise, Millis, Outcome, ParseOptions, Role, Session, TraceEvent,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{Map, Value};
use tower::ServiceExt;

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// 1. Coder exactness

const S: &str = "p1-t1-goldmind";

fn ev(ts: Millis, action: Action, url: &str) -> TraceEvent {
    TraceEvent {
        ts,
        session_id: S.into(),
        participant_id: "p1".into(),
        role: Role::Tutor,
        expertise: Expertise::Novice,
        condition: "goldmind".into(),
        task_id: "t1".into(),
        action,
        url: format!("https://lms/{url}"),
        target: None,
        payload: None,
    }
}

fn seq(steps: &[(Millis, Action, &str)]) -> Vec<TraceEvent> {
    steps.iter().map(|&(ts, a, u)| ev(ts, a, u)).collect()
}

fn isolated(code: KmCode) -> Vec<TraceEvent> {
    use Action::*;
    match code {
        KmCode::AP1_SearchExplore => seq(&[(0, Navigation, "a"), (1_000, Scroll, "a"), (2_000, Click, "a"), (3_000, Navigation, "b")]),
        KmCode::AP2_SwitchTabs => seq(&[(0, Navigation, "a"), (1_000, Navigation, "b"), (2_000, Navigation, "c")]),
        KmCode::AP3_ReadEngage => seq(&[(0, Click, "a"), (6_000, Click, "a")]),
        KmCode::AP4_OpenInteract => seq(&[(0, Navigation, "a"), (1_000, Click, "a")]),
        KmCode::SP1_TypeInteract => seq(&[(0, Click, "a"), (1_000, Click, "a"), (2_000, Click, "a"), (3_000, Click, "a"), (4_000, Type, "a")]),
        KmCode::SP2_SelectType => seq(&[(0, Select, "a"), (1_000, Type, "a")]),
        KmCode::SP3_TypeDriven => seq(&[(0, Type, "a"), (6_000, Type, "a")]),
        KmCode::SP4_OpenType => seq(&[(0, Navigation, "a"), (1_000, Click, "a"), (2_000, Type, "a")]),
        KmCode::ShP1_ShareResource => seq(&[(0, Submit, "a")]),
        KmCode::SFPush_WithInteraction => seq(&[(0, PushShareflow, "a"), (10_000, PopupClick, "a")]),
        KmCode::SFPush_NoInteraction => seq(&[(0, PushShareflow, "a")]),
        KmCode::KPush_WithInteraction => seq(&[(0, PushKnowledge, "a"), (10_000, PopupClick, "a")]),
        KmCode::KPush_NoInteraction => seq(&[(0, PushKnowledge, "a")]),
        KmCode::Querying => {
            let mut q = ev(0, Query, "q");
            q.payload = Some(Map::from_iter([("text".to_string(), Value::from("gradebook"))]));
            vec![q, ev(2_000, Response, "a")]
        }
    }
}

fn coder_exactness() -> Check {
    let cfg = CoderConfig::default();
    let mut exact = 0;
    for code in KmCode::ALL {
        let events = isolated(code);
        let s = Session { key: events[0].key(), events, outcome: Outcome::Unknown, order_index: 0 };
        let coded = code_session(&s, &cfg);
        let got: Vec<KmCode> = coded.lines.iter().map(|l| l.code).collect();
        ensure!(got == vec![code] && coded.residual == 0, "{code}: got {got:?}, residual {}", coded.residual);
        exact += 1;
    }
    ensure!(exact == 14, "{exact}/14 codes");
    Ok(())
}

// 2. Miner oracle

fn miner_oracle() -> Check {
    let abc: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let mut traces = vec![abc; 10];
    traces.push(["a", "c"].map(String::from).to_vec());
    let log = StepLog::new(traces);
    let t = directly_follows(&log).map_err(|e| e.to_string())?;
    let ab = dependency_measure(&t, "a", "b");
    let ac = dependency_measure(&t, "a", "c");
    ensure!((ab - 10.0 / 11.0).abs() < 1e-12, "a→b = {ab}");
    ensure!((ac - 0.5).abs() < 1e-12, "a→c = {ac}");
    let cfg = MinerConfig { dependency_threshold: 0.9, ..MinerConfig::default() };
    let g = mine_dependency_graph(&log, &cfg).map_err(|e| e.to_string())?;
    ensure!(g.edge("a", "c").is_none(), "a→c survived the 0.9 threshold");
    let flow = extract_main_flow(&g).map_err(|e| e.to_string())?;
    ensure!(flow == ["a", "b", "c"], "main flow {flow:?}");
    Ok(())
}

// 3. ENA oracle

fn random_lines(n: usize, codes: &[KmCode], seed: u64) -> Vec<CodedLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next: BTreeMap<ConversationKey, usize> = BTreeMap::new();
    (0..n)
        .map(|_| {
            let cond = ["goldmind", "baseline"][rng.random_range(0..2)];
            let task = ["t1", "t2"][rng.random_range(0..2)];
            let conversation = ConversationKey { condition: cond.into(), task_id: task.into() };
            let idx = next.entry(conversation.clone()).or_insert(0);
            *idx += 1;
            CodedLine {
                unit: UnitKey {
                    participant_id: format!("p{}", rng.random_range(0..6)),
                    task_id: task.into(),
                    condition: cond.into(),
                },
                conversation,
                line_index: *idx - 1,
                code: codes[rng.random_range(0..codes.len())],
                span: (0, 0),
                paired: None,
                ts: 0,
                end_ts: 0,
                outcome: Outcome::Unknown,
                order_index: 0,
            }
        })
        .collect()
}

fn naive_windows(lines: &[CodedLine], cfg: &EnaConfig) -> BTreeMap<UnitKey, Vec<u64>> {
    let k = cfg.code_set.len();
    let pos = |c: KmCode| cfg.code_set.iter().position(|x| *x == c);
    let mut out: BTreeMap<UnitKey, Vec<u64>> = BTreeMap::new();
    let mut convs: BTreeMap<&ConversationKey, Vec<&CodedLine>> = BTreeMap::new();
    for l in lines {
        convs.entry(&l.conversation).or_default().push(l);
        out.entry(l.unit.clone()).or_insert_with(|| vec![0; k * (k - 1) / 2]);
    }
    for conv in convs.values_mut() {
        conv.sort_by_key(|l| l.line_index);
        for i in 0..conv.len() {
            let Some(own) = pos(conv[i].code) else { continue };
            let start = (i + 1).saturating_sub(cfg.window);
            let others: BTreeSet<usize> =
                conv[start..=i].iter().filter_map(|l| pos(l.code)).filter(|&o| o != own).collect();
            let v = out.get_mut(&conv[i].unit).unwrap();
            for o in others {
                v[pair_index(own, o, k)] += 1;
            }
        }
    }
    out
}

fn ena_oracle() -> Check {
    let all = KmCode::ALL.to_vec();
    for window in 2..=5 {
        let lines = random_lines(1_000, &all[..9], 300 + window as u64);
        let cfg = EnaConfig { window, code_set: all.clone() };
        let fast = accumulate(&lines, &cfg).map_err(|e| e.to_string())?;
        let slow = naive_windows(&lines, &cfg);
        ensure!(fast.len() == slow.len(), "window {window}: {} vs {} units", fast.len(), slow.len());
        for v in &fast {
            let expect: Vec<f64> = slow[&v.unit].iter().map(|&x| x as f64).collect();
            ensure!(v.entries == expect, "window {window}: unit {} differs", v.unit);
        }
    }
    let codes = &all[..7];
    let lines = random_lines(1_000, codes, 9);
    let cfg = EnaConfig { window: 4, code_set: codes.to_vec() };
    let m = build_model(&lines, &cfg, ["goldmind", "baseline"]).map_err(|e| e.to_string())?;
    let b = &m.space.basis;
    for i in 0..b.len() {
        for j in 0..b.len() {
            let dot: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            ensure!((dot - want).abs() < 1e-10, "basis {i}·{j} = {dot}");
        }
    }
    ensure!(b.len() >= 2, "only {} dimensions", b.len());
    for g in &m.space.group_means {
        ensure!(g[1].abs() < 1e-10, "MR2 group mean {}", g[1]);
    }
    for net in &m.mean_networks {
        let zero = subtract_networks(net, net).map_err(|e| e.to_string())?;
        ensure!(zero.weights.iter().all(|&w| w == 0.0), "subtract(G,G) non-zero");
    }
    Ok(())
}

// 4. Mixed model

fn panel(participants: usize, beta_c: f64, sd_u: f64, sd_e: f64, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Normal::new(0.0, sd_u).unwrap();
    let e = Normal::new(0.0, sd_e).unwrap();
    let mut out = Vec::new();
    for p in 0..participants {
        let up = u.sample(&mut rng);
        for (c, shift) in [("baseline", 0.0), ("goldmind", beta_c)] {
            let task = if (p + usize::from(c == "goldmind")) % 2 == 0 { "t1" } else { "t2" };
            let t_eff = if task == "t2" { 0.3 } else { 0.0 };
            out.push(Observation::new(
                1.0 + shift + t_eff + up + e.sample(&mut rng),
                &format!("p{p:03}"),
                &[("condition", c), ("task", task)],
            ));
        }
    }
    out
}

fn lmm_spec() -> RegressionSpec {
    RegressionSpec::condition_task("y").with_reference("condition", "baseline").with_reference("task", "t1")
}

fn lmm_checks() -> Check {
    let data = panel(20, -0.5, 1.0, 0.5, 3);
    let x = DMatrix::from_fn(data.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => f64::from(u8::from(data[i].factors["condition"] == "goldmind")),
        _ => f64::from(u8::from(data[i].factors["task"] == "t2")),
    });
    let y = DVector::from_iterator(data.len(), data.iter().map(|o| o.y));
    let ols = (x.transpose() * &x).cholesky().ok_or("singular design")?.solve(&(x.transpose() * y));
    let fit = fit_lmm_with(&lmm_spec(), &data, LmmOptions { fixed_lambda: Some(0.0) }).map_err(|e| e.to_string())?;
    for j in 0..3 {
        ensure!((fit.beta[j] - ols[j]).abs() < 1e-8, "λ=0 coefficient {j}: {} vs OLS {}", fit.beta[j], ols[j]);
    }

    let data = panel(60, -0.5, 1.0, 0.3, 42);
    let fit = fit_lmm(&lmm_spec(), &data).map_err(|e| e.to_string())?;
    let j = fit.coef("condition[goldmind]").ok_or("no condition column")?;
    ensure!((fit.beta[j] + 0.5).abs() <= 0.1, "β̂_c = {}", fit.beta[j]);
    ensure!(fit.ci_low[j] <= -0.5 && -0.5 <= fit.ci_high[j], "CI [{}, {}]", fit.ci_low[j], fit.ci_high[j]);

    let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / (GRID_POINTS - 1) as f64;
    let mut grid = vec![0.0];
    grid.extend((0..GRID_POINTS).map(|i| (LOG_LAMBDA_MIN + step * i as f64).exp()));
    for l in grid {
        if let Some(ll) = profile_log_likelihood(&lmm_spec(), &data, l) {
            ensure!(fit.log_likelihood >= ll - 1e-9, "λ={l} beats the optimum: {ll} > {}", fit.log_likelihood);
        }
    }
    Ok(())
}

// 5. Logistic

fn table(a: usize, b: usize, c: usize, d: usize) -> Vec<Observation> {
    let mut out = Vec::new();
    for (n, cond, y) in [(a, "goldmind", 1.0), (b, "goldmind", 0.0), (c, "baseline", 1.0), (d, "baseline", 0.0)] {
        for i in 0..n {
            out.push(Observation::new(y, &format!("{cond}{y}{i}"), &[("condition", cond)]));
        }
    }
    out
}

fn logistic_checks() -> Check {
    let spec = RegressionSpec::logistic_condition("y").with_reference("condition", "baseline");
    let (a, b, c, d) = (18, 6, 9, 15);
    let fit = fit_logistic(&spec, &table(a, b, c, d)).map_err(|e| e.to_string())?;
    let want = ((a * d) as f64 / (b * c) as f64).ln();
    ensure!((fit.beta[1] - want).abs() < 1e-6, "β1 = {} vs ln(OR) = {want}", fit.beta[1]);
    match fit_logistic(&spec, &table(10, 0, 0, 10)) {
        Err(StatsError::CompleteSeparation) => Ok(()),
        other => Err(format!("degenerate table gave {other:?}")),
    }
}

// 6. Survey scoring

fn survey_checks() -> Check {
    let sus = |items: Vec<i64>| score_sus(&SurveyResponse::new("p", Instrument::Sus, items)).map_err(|e| e.to_string());
    ensure!(sus(vec![3; 10])? == 50.0, "all-3s SUS is not 50");
    let ceiling: Vec<i64> = (0..10).map(|i| if i % 2 == 0 { 5 } else { 1 }).collect();
    let floor: Vec<i64> = (0..10).map(|i| if i % 2 == 0 { 1 } else { 5 }).collect();
    ensure!(sus(ceiling)? == 100.0, "ceiling SUS is not 100");
    ensure!(sus(floor)? == 0.0, "floor SUS is not 0");
    let km = score_km_sus(&SurveyResponse::new("p", Instrument::KmSus, vec![3; 25]), &default_km_sus_groups())
        .map_err(|e| e.to_string())?;
    ensure!(km.subscales.len() == 4, "{} KM-SUS subscales", km.subscales.len());
    for (p, v) in &km.subscales {
        ensure!(*v == 50.0, "neutral KM-SUS {} = {v}", p.as_str());
    }
    Ok(())
}

// 7. Improvement arithmetic

fn improvement_checks() -> Check {
    let speed = improvement(MetricId::RetrievalSpeed, 39.0, 146.0);
    ensure!(speed.descriptor == "73% faster", "retrieval: {:?}", speed.descriptor);
    let km = improvement(MetricId::KmTime, 152.40, 274.55);
    let pct = km.percent.ok_or("no KM-time percent")?;
    ensure!((pct - 44.0).abs() < 0.5, "KM time {pct}%");
    ensure!(km.descriptor == "44% less KM time", "KM time: {:?}", km.descriptor);
    Ok(())
}

// 8. Recommender replay

fn replay_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

fn replay_engine() -> Result<RecommenderEngine, String> {
    let dir = replay_fixture().join("shareflows");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.path()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    paths.sort();
    let library = paths
        .iter()
        .map(|p| ShareFlow::from_record(&std::fs::read_to_string(p).map_err(|e| e.to_string())?).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let tasks = [("quiz", "quiz"), ("gradebook", "gradebook"), ("forum", "forum")]
        .map(|(t, term)| TaskDescriptor { task_id: t.into(), terms: vec![term.into()] })
        .to_vec();
    Ok(RecommenderEngine::new(EngineConfig::default(), library, None, tasks))
}

fn novice_events() -> Result<Vec<TraceEvent>, String> {
    let bytes = std::fs::read(replay_fixture().join("novice.jsonl")).map_err(|e| e.to_string())?;
    let parsed = parse_trace_log(&bytes, "novice", ParseOptions { strict: true }).map_err(|e| e.to_string())?;
    Ok(parsed.corpus.sessions.into_iter().flat_map(|s| s.events).collect())
}

async fn call(app: &axum::Router, req: Request<Body>) -> Result<(StatusCode, Vec<u8>), String> {
    let resp = app.clone().oneshot(req).await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let body = resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes();
    Ok((status, body.to_vec()))
}

fn recommender_replay() -> Check {
    let events = novice_events()?;
    let mut batch = replay_engine()?;
    ensure!(batch.library.len() == 3, "{} ShareFlows in the fixture", batch.library.len());
    let flow_x = "sf-quiz-e01";
    let batch_out: Vec<Vec<Recommendation>> = events.iter().map(|e| batch.on_event(e.clone())).collect();
    let log = batch.log(&events[0].session_id).ok_or("no session log")?.clone();
    let for_x = |r: &&Recommendation| matches!(&r.payload, Payload::Shareflow(id) if id == flow_x);
    let pushed = log.entries.iter().filter(for_x).filter(|r| r.is_pushed()).count();
    ensure!(pushed == 1, "flow X pushed {pushed} times");
    let first = log.entries.iter().filter(for_x).find(|r| r.is_pushed()).unwrap();
    let repeats: Vec<&Recommendation> = log.entries.iter().filter(for_x).filter(|r| !r.is_pushed()).collect();
    ensure!(!repeats.is_empty(), "no repeat of flow X was offered");
    for r in &repeats {
        ensure!(
            r.status == Status::Suppressed
                && r.reason == Some(SuppressReason::Cooldown)
                && r.issued_ts - first.issued_ts < batch.config.policy.cooldown,
            "repeat {} not suppressed by cooldown: {:?}",
            r.id,
            r.reason
        );
    }
    let others = log.entries.iter().filter(|r| r.is_pushed() && !for_x(r)).count();
    ensure!(others == 0, "{others} pushes of other flows");

    let state = AppState::new(replay_engine()?, None).map_err(|e| e.to_string())?;
    let app = router(state);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(async {
        for (i, e) in events.iter().enumerate() {
            let req = Request::post("/events")
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(e).unwrap()))
                .unwrap();
            let (status, body) = call(&app, req).await?;
            ensure!(status == StatusCode::OK, "event {i}: HTTP {status}");
            let got: Vec<Recommendation> = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
            ensure!(got == batch_out[i], "event {i}: service {got:?} vs batch {:?}", batch_out[i]);
        }
        let uri = format!("/sessions/{}/recommendations", events[0].session_id);
        let (status, body) = call(&app, Request::get(uri).body(Body::empty()).unwrap()).await?;
        ensure!(status == StatusCode::OK, "recommendations: HTTP {status}");
        let recs: SessionRecommendations = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        ensure!(recs.history == log.entries, "service history differs from batch log");
        Ok(())
    })
}

// 9. End-to-end determinism

fn pipeline_config(out: &Path) -> Result<PipelineConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/pipeline.toml");
    let mut cfg = PipelineConfig::load(&path).map_err(|e| e.to_string())?;
    cfg.seed = 42;
    cfg.out_dir = out.to_path_buf();
    Ok(cfg)
}

fn end_to_end_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(&pipeline_config(a.path())?).map_err(|e| e.to_string())?;
    run_pipeline(&pipeline_config(b.path())?).map_err(|e| e.to_string())?;
    let ma = std::fs::read(a.path().join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let mb = std::fs::read(b.path().join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    ensure!(!ma.is_empty() && ma == mb, "manifests differ");
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 coder exactness", coder_exactness, Some(Duration::from_secs(1))),
        ("2 miner oracle", miner_oracle, Some(Duration::from_secs(1))),
        ("3 ENA oracle", ena_oracle, Some(Duration::from_secs(10))),
        ("4 mixed model", lmm_checks, Some(Duration::from_secs(10))),
        ("5 logistic", logistic_checks, Some(Duration::from_secs(1))),
        ("6 survey scoring", survey_checks, None),
        ("7 improvement arithmetic", improvement_checks, None),
        ("8 recommender replay", recommender_replay, Some(Duration::from_secs(2))),
        ("9 end-to-end determinism", end_to_end_determinism, Some(Duration::from_secs(30))),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(()), Some(l)) if took > l => Err(format!("took {took:.2?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(()) => println!("PASS  {name} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({took:.2?}): {why}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
