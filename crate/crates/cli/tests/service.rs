use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kflow::{router, AppState, ErrorBody, ServiceError, SessionRecommendations};
use kflow_core::recommender::{EngineConfig, Recommendation, RecommenderEngine, Status, TaskDescriptor};
use kflow_core::shareflow::ShareFlow;
use kflow_core::trace::TraceEvent;
use serde_json::json;
use tower::ServiceExt;

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/replay"))
}

fn engine() -> RecommenderEngine {
    let record = std::fs::read_to_string(fixture().join("shareflows/sf-quiz-e01.json")).unwrap();
    let library = vec![ShareFlow::from_record(&record).unwrap()];
    let tasks = vec![TaskDescriptor { task_id: "quiz".into(), terms: vec!["quiz".into()] }];
    RecommenderEngine::new(EngineConfig::default(), library, None, tasks)
}

fn quiz_page(ts: i64) -> TraceEvent {
    serde_json::from_value(json!({
        "ts": ts, "session": "n01-quiz-goldmind", "participant": "n01", "role": "tutor",
        "expertise": "novice", "condition": "goldmind", "task": "quiz", "action": "navigation",
        "url": "https://lms.example.edu/quizzes", "payload": {"terms": {"quiz": 3.0}}
    }))
    .unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(body.into()).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn event_then_recommendations() {
    let app = router(AppState::new(engine(), None).unwrap());
    let (status, body) = send(&app, post("/events", serde_json::to_vec(&quiz_page(1_000)).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    let issued: Vec<Recommendation> = serde_json::from_slice(&body).unwrap();
    assert_eq!(issued.len(), 1);

    let (status, body) = send(&app, get("/sessions/n01-quiz-goldmind/recommendations")).await;
    assert_eq!(status, StatusCode::OK);
    let recs: SessionRecommendations = serde_json::from_slice(&body).unwrap();
    assert_eq!(recs.queued.len(), 1);
    assert_eq!(recs.queued[0].status, Status::Delivered);

    let ack = format!("/recommendations/{}/ack", recs.queued[0].id);
    let (status, body) = send(&app, post(&ack, r#"{"ts": 5000}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let acked: Recommendation = serde_json::from_slice(&body).unwrap();
    assert_eq!(acked.status, Status::Interacted);
}

#[tokio::test]
async fn shareflow_page_and_missing_resources() {
    let app = router(AppState::new(engine(), None).unwrap());
    let (status, body) = send(&app, get("/shareflows/sf-quiz-e01")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("<section class=\"step\""));

    for req in [get("/shareflows/nope"), get("/sessions/nope/recommendations"), post("/recommendations/nope/ack", "")] {
        let (status, body) = send(&app, req).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        let err: ErrorBody = serde_json::from_slice(&body).unwrap();
        assert!(err.error.contains("nope"));
    }
}

#[tokio::test]
async fn rejects_bad_and_out_of_order_events() {
    let app = router(AppState::new(engine(), None).unwrap());
    let (status, _) = send(&app, post("/events", "{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    send(&app, post("/events", serde_json::to_vec(&quiz_page(10_000)).unwrap())).await;
    let (status, body) = send(&app, post("/events", serde_json::to_vec(&quiz_page(9_000)).unwrap())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(serde_json::from_slice::<ErrorBody>(&body).is_ok());
}

#[test]
fn empty_library_is_refused() {
    let empty = RecommenderEngine::new(EngineConfig::default(), Vec::new(), None, Vec::new());
    assert!(matches!(AppState::new(empty, None), Err(ServiceError::MissingLibrary)));
}

#[tokio::test]
async fn state_flushes_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let state = AppState::new(engine(), Some(path.clone())).unwrap();
    let app = router(state.clone());
    send(&app, post("/events", serde_json::to_vec(&quiz_page(1_000)).unwrap())).await;
    assert_eq!(state.flush().unwrap(), Some(path.clone()));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(saved["n01-quiz-goldmind"]["log"]["entries"].as_array().unwrap().len(), 1);
}
