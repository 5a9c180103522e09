//! HTTP service for interactive elicitation sessions.
//!
//! Routes:
//! - `POST /sessions` creates a session from a [`SessionConfig`] body
//! - `GET /sessions/{id}/query` returns the pending query, proposing one if needed
//! - `POST /sessions/{id}/response` answers the pending query
//! - `GET /sessions/{id}` returns a read-only snapshot
//! - `GET /healthz`
//!
//! Every session keeps a newline-JSON event log under `<data-dir>/sessions`,
//! and [`AppState::open`] rebuilds all sessions from those logs.

pub mod error;
pub mod session;

pub use error::{ApiError, ErrorBody};
pub use session::{CatalogSet, Event, SessionConfig, SessionView};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use elicit_core::response::ResponseWire;
use serde_json::{json, Value};
use session::{discover_sets, CreatedView, QueryView, Session, UpdateView, SESSIONS_DIR};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use tokio::sync::Mutex;

pub const DEFAULT_PORT: u16 = 8080;

type SessionMap = HashMap<String, Arc<Mutex<Session>>>;

/// Catalog sets, live sessions and the event-log directory.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    sets: BTreeMap<String, Arc<CatalogSet>>,
    sessions: RwLock<SessionMap>,
    log_dir: PathBuf,
}

impl AppState {
    /// Loads catalog sets from `data_dir` and replays any stored sessions.
    pub fn open(data_dir: &Path) -> Result<Self, ApiError> {
        let sets = discover_sets(data_dir).map_err(ApiError::internal)?;
        Self::with_sets(sets, &data_dir.join(SESSIONS_DIR))
    }

    pub fn with_sets(sets: BTreeMap<String, Arc<CatalogSet>>, log_dir: &Path) -> Result<Self, ApiError> {
        std::fs::create_dir_all(log_dir).map_err(ApiError::internal)?;
        let mut logs: Vec<PathBuf> = std::fs::read_dir(log_dir)
            .map_err(ApiError::internal)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
            .collect();
        logs.sort();
        let mut sessions = HashMap::new();
        for log in logs {
            let s = Session::replay(&log, &sets)?;
            sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(Self {
            inner: Arc::new(Inner {
                sets,
                sessions: RwLock::new(sessions),
                log_dir: log_dir.to_path_buf(),
            }),
        })
    }

    pub fn set_names(&self) -> Vec<String> {
        self.inner.sets.keys().cloned().collect()
    }

    pub fn n_sessions(&self) -> usize {
        self.inner.sessions.read().expect("session map").len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/query", get(next_query))
        .route("/sessions/{id}/response", post(submit_response))
        .with_state(state)
}

/// Port from the `PORT` environment variable, defaulting to 8080.
pub fn port_from_env() -> u16 {
    std::env::var("PORT").ok().and_then(|p| p.parse().ok()).unwrap_or(DEFAULT_PORT)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Runs `f` on the locked session off the async executor.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    let mut guard = state.session(id)?.lock_owned().await;
    tokio::task::spawn_blocking(move || f(&mut guard)).await.map_err(ApiError::internal)?
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<SessionConfig>, JsonRejection>,
) -> Result<(StatusCode, Json<CreatedView>), ApiError> {
    let config = body(payload)?;
    let set = state.inner.sets.get(&config.catalog).cloned().ok_or_else(|| {
        ApiError::not_found(format!(
            "unknown catalog set `{}`; available: [{}]",
            config.catalog,
            state.set_names().join(", ")
        ))
    })?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let log_dir = state.inner.log_dir.clone();
    let session = tokio::task::spawn_blocking(move || Session::create(id, config, set, &log_dir))
        .await
        .map_err(ApiError::internal)??;
    let view = session.created_view();
    state
        .inner
        .sessions
        .write()
        .expect("session map")
        .insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn next_query(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<QueryView>, ApiError> {
    with_session(&state, &id, |s| s.next_query()).await.map(Json)
}

async fn submit_response(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<ResponseWire>, JsonRejection>,
) -> Result<Json<UpdateView>, ApiError> {
    let session = state.session(&id)?;
    let wire = body(payload)?;
    let mut guard = session.lock_owned().await;
    tokio::task::spawn_blocking(move || guard.submit(&wire))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

async fn get_state(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    with_session(&state, &id, |s| Ok(s.view())).await.map(Json)
}
