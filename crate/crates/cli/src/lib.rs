//! Recommendation service: an axum router over a shared [`RecommenderEngine`].

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kflow_core::recommender::{Recommendation, RecommenderEngine, RecommenderError};
use kflow_core::shareflow::render_scrollytelling;
use kflow_core::trace::{Millis, TraceEvent};
use serde::{Deserialize, Serialize};

pub const PORT_ENV: &str = "KFLOW_PORT";
pub const DEFAULT_PORT: u16 = 8080;
pub const STATE_FILE: &str = "service_state.json";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("port {port} unavailable: {source}")]
    PortUnavailable { port: u16, source: std::io::Error },
    #[error("ShareFlow library is empty")]
    MissingLibrary,
    #[error("flushing session state to {path}: {source}")]
    Flush { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct AppState {
    engine: Mutex<RecommenderEngine>,
    /// Where session state is written on shutdown.
    pub state_path: Option<PathBuf>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(engine: RecommenderEngine, state_path: Option<PathBuf>) -> Result<SharedState, ServiceError> {
        if engine.library.is_empty() {
            return Err(ServiceError::MissingLibrary);
        }
        Ok(Arc::new(AppState {
            engine: Mutex::new(engine),
            state_path,
        }))
    }

    pub fn engine(&self) -> MutexGuard<'_, RecommenderEngine> {
        // A panicked handler leaves the engine usable; each call is self-contained.
        self.engine.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes every session's events and push log as JSON.
    pub fn flush(&self) -> Result<Option<PathBuf>, ServiceError> {
        let Some(path) = &self.state_path else {
            return Ok(None);
        };
        let text = serde_json::to_string_pretty(&self.engine().sessions).expect("session state serializes");
        let err = |source| ServiceError::Flush {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(err)?;
        }
        std::fs::write(path, text).map_err(err)?;
        Ok(Some(path.clone()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionRecommendations {
    pub session_id: String,
    /// Pushes still awaiting interaction.
    pub queued: Vec<Recommendation>,
    pub history: Vec<Recommendation>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct AckRequest {
    #[serde(default)]
    pub ts: Option<Millis>,
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/events", post(post_event))
        .route("/sessions/{id}/recommendations", get(get_recommendations))
        .route("/recommendations/{id}/ack", post(ack))
        .route("/shareflows/{id}", get(get_shareflow))
        .with_state(state)
}

async fn post_event(State(st): State<SharedState>, body: Bytes) -> Response {
    let event: TraceEvent = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid event: {e}")),
    };
    if let Err(e) = event.check() {
        return error(StatusCode::BAD_REQUEST, format!("invalid event: {e}"));
    }
    let mut engine = st.engine();
    let last = engine
        .sessions
        .get(&event.session_id)
        .and_then(|s| s.events.last())
        .map(|e| e.ts);
    if let Some(last) = last.filter(|&l| event.ts < l) {
        return error(
            StatusCode::CONFLICT,
            format!("event at {} precedes the session's last event at {last}", event.ts),
        );
    }
    Json(engine.on_event(event)).into_response()
}

async fn get_recommendations(State(st): State<SharedState>, Path(id): Path<String>) -> Response {
    let engine = st.engine();
    match engine.log(&id) {
        Some(log) => Json(SessionRecommendations {
            session_id: id,
            queued: log.entries.iter().filter(|r| r.is_active()).cloned().collect(),
            history: log.entries.clone(),
        })
        .into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown session {id:?}")),
    }
}

async fn ack(State(st): State<SharedState>, Path(id): Path<String>, body: Bytes) -> Response {
    let req = if body.iter().all(u8::is_ascii_whitespace) {
        AckRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid ack: {e}")),
        }
    };
    match st.engine().ack(&id, req.ts) {
        Ok(rec) => Json(rec).into_response(),
        Err(e @ RecommenderError::UnknownRecommendation(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e) => error(StatusCode::CONFLICT, e.to_string()),
    }
}

async fn get_shareflow(State(st): State<SharedState>, Path(id): Path<String>) -> Response {
    let engine = st.engine();
    match engine.shareflow(&id) {
        Some(sf) => Html(render_scrollytelling(sf)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown ShareFlow {id:?}")),
    }
}

/// Port from `KFLOW_PORT`, else the default.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV}: {v:?} is not a port number")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

/// Serves until `shutdown` resolves, then flushes session state.
pub async fn serve(
    state: SharedState,
    port: u16,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<Option<PathBuf>, ServiceError> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::PortUnavailable { port, source })?;
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.flush()
}
