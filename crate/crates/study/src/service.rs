//! HTTP service for the browser client.
//!
//! Endpoints:
//! - `POST /sessions` create (or resume) a session
//! - `GET /sessions/{id}/page` current page
//! - `POST /sessions/{id}/page` submit the current page
//! - `GET /records` all records as NDJSON
//! - `GET /report` analysis report as JSON
//! - `GET /videos/...` static video files

use crate::analysis::{analyze, Design};
use crate::config::StudyConfig;
use crate::record::{RatingRecord, RecordStore, StoreError};
use crate::session::{create_session, participant_rng, PagePayload, PageSubmission, SessionState, SubmitError};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};
use tower_http::services::ServeDir;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("invalid participant id {0:?}")]
    InvalidParticipant(String),
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::InvalidParticipant(_) => StatusCode::BAD_REQUEST,
            ServiceError::Submit(
                SubmitError::NavigationLocked { .. }
                | SubmitError::NotReached { .. }
                | SubmitError::Completed,
            ) => StatusCode::CONFLICT,
            ServiceError::Submit(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

/// Session progress returned after every state change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub participant_id: String,
    pub completed: bool,
    pub pages_done: usize,
    pub page_count: usize,
    pub page: Option<PagePayload>,
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    pub participant_id: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ReportQuery {
    #[serde(default)]
    pub include_incomplete: bool,
}

type Session = Arc<Mutex<SessionState>>;

pub struct StudyService {
    cfg: StudyConfig,
    store: RecordStore,
    sessions: Mutex<HashMap<String, Session>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl StudyService {
    /// Opens the store and rebuilds the sessions of participants already in
    /// it; orders are reproducible from the study seed and participant id.
    pub fn new(cfg: StudyConfig, store: RecordStore) -> Result<Self, StoreError> {
        let existing = store.snapshot()?;
        let mut pages_done: HashMap<&str, BTreeSet<usize>> = HashMap::new();
        for r in &existing {
            pages_done.entry(&r.participant_id).or_default().insert(r.page_index);
        }
        let mut sessions = HashMap::new();
        for (pid, done) in pages_done {
            let mut s = create_session(&cfg, pid, &mut participant_rng(cfg.seed, pid));
            for _ in 0..done.len().min(s.page_count()) {
                s.advance();
            }
            sessions.insert(pid.to_string(), Arc::new(Mutex::new(s)));
        }
        Ok(Self {
            cfg,
            store,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    fn view(&self, s: &SessionState) -> SessionView {
        SessionView {
            participant_id: s.participant_id.clone(),
            completed: s.completed,
            pages_done: s.current,
            page_count: s.page_count(),
            page: s.payload(&self.cfg),
        }
    }

    fn session(&self, id: &str) -> Result<Session, ServiceError> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    /// Creates a session, or returns the existing one for a known id.
    pub fn create(&self, participant_id: Option<String>) -> Result<SessionView, ServiceError> {
        let mut sessions = lock(&self.sessions);
        let pid = match participant_id {
            Some(p) => {
                let valid = !p.is_empty()
                    && p.len() <= 64
                    && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
                if !valid {
                    return Err(ServiceError::InvalidParticipant(p));
                }
                p
            }
            None => (1..)
                .map(|i| format!("p{i:04}"))
                .find(|p| !sessions.contains_key(p))
                .expect("unbounded ids"),
        };
        let session = sessions
            .entry(pid.clone())
            .or_insert_with(|| {
                log::info!("new session {pid}");
                let s = create_session(&self.cfg, &pid, &mut participant_rng(self.cfg.seed, &pid));
                Arc::new(Mutex::new(s))
            })
            .clone();
        drop(sessions);
        let s = lock(&session);
        Ok(self.view(&s))
    }

    pub fn current(&self, id: &str) -> Result<SessionView, ServiceError> {
        let session = self.session(id)?;
        let s = lock(&session);
        Ok(self.view(&s))
    }

    /// Validates, persists, then advances, all under the session's lock.
    pub fn submit(&self, id: &str, sub: &PageSubmission) -> Result<SessionView, ServiceError> {
        let session = self.session(id)?;
        let mut s = lock(&session);
        let records = s.validate(sub, now_ms())?;
        self.store.append(&records)?;
        s.advance();
        Ok(self.view(&s))
    }

    pub fn records(&self) -> Result<Vec<RatingRecord>, StoreError> {
        self.store.snapshot()
    }
}

async fn create_handler(
    State(svc): State<Arc<StudyService>>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<SessionView>), ServiceError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    Ok((StatusCode::CREATED, Json(svc.create(req.participant_id)?)))
}

async fn page_handler(
    State(svc): State<Arc<StudyService>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ServiceError> {
    Ok(Json(svc.current(&id)?))
}

async fn submit_handler(
    State(svc): State<Arc<StudyService>>,
    Path(id): Path<String>,
    Json(sub): Json<PageSubmission>,
) -> Result<Json<SessionView>, ServiceError> {
    Ok(Json(svc.submit(&id, &sub)?))
}

async fn records_handler(State(svc): State<Arc<StudyService>>) -> Result<Response, ServiceError> {
    let mut body = String::new();
    for r in svc.records()? {
        body.push_str(&serde_json::to_string(&r).expect("records always serialize"));
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn report_handler(
    State(svc): State<Arc<StudyService>>,
    Query(q): Query<ReportQuery>,
) -> Result<Response, ServiceError> {
    let records = svc.records()?;
    let report = analyze(&records, &Design::from_config(svc.config()), q.include_incomplete);
    Ok(Json(report).into_response())
}

/// Builds the router. Videos are served from `video_dir` when given.
pub fn router(svc: Arc<StudyService>, video_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/sessions", post(create_handler))
        .route("/sessions/{id}/page", get(page_handler).post(submit_handler))
        .route("/records", get(records_handler))
        .route("/report", get(report_handler));
    if let Some(dir) = video_dir {
        app = app.nest_service("/videos", ServeDir::new(dir));
    }
    app.with_state(svc)
}

/// Serves until ctrl-c.
pub async fn serve(
    svc: Arc<StudyService>,
    video_dir: Option<PathBuf>,
    addr: std::net::SocketAddr,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("study service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc, video_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
