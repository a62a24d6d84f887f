//! REST API over sessions stored under one data directory.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/sessions` | list |
//! | POST | `/sessions` | create from a config body, 201 |
//! | GET | `/sessions/{id}` | state summary |
//! | POST | `/sessions/{id}/advance` | run the current round, returns its report |
//! | GET | `/sessions/{id}/fmea?format=csv\|json` | export |
//! | GET | `/sessions/{id}/banks?kind=&limit=&offset=` | bank records, append order |
//! | GET | `/sessions/{id}/events?after=&timeout_ms=` | long-poll for new events |
//! | POST | `/sessions/{id}/rows/{rid}/review` | approve, reject or edit a row |
//!
//! Mutations on one session are serialized; reads use the last published
//! snapshot and never wait on a running round.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fmea_panel_core::domain::FmeaRow;
use fmea_panel_core::engine::{EventRecord, ReviewAction, RoundReport, RowEdits, Session};
use fmea_panel_core::error::EngineError;
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Mutex};

use crate::banks::{export_fmea, BankKind, ExportFormat};
use crate::config::{build_provider, ConfigError, FieldError, ProviderConfig, SessionConfig, SharedCompleter};
use crate::store::{drive_round, folded_records, DriveError, SessionStore, StoreError};

struct Worker {
    session: Session,
    store: SessionStore,
    completer: SharedCompleter,
}

pub struct SessionHandle {
    worker: Arc<Mutex<Worker>>,
    view: RwLock<Arc<Session>>,
    seq: watch::Sender<u64>,
}

impl SessionHandle {
    fn new(session: Session, store: SessionStore, completer: SharedCompleter) -> Arc<Self> {
        let view = RwLock::new(Arc::new(session.clone()));
        let (seq, _) = watch::channel(session.events().len() as u64);
        Arc::new(Self { worker: Arc::new(Mutex::new(Worker { session, store, completer })), view, seq })
    }

    fn publish(&self, session: &Session) {
        *self.view.write().expect("view lock") = Arc::new(session.clone());
        self.seq.send_replace(session.events().len() as u64);
    }

    fn snapshot(&self) -> Arc<Session> {
        self.view.read().expect("view lock").clone()
    }
}

pub struct AppState {
    data_dir: PathBuf,
    base_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// `base_dir` resolves relative paths in posted configs.
    pub fn new(data_dir: PathBuf, base_dir: PathBuf) -> Self {
        Self { data_dir, base_dir, sessions: RwLock::new(HashMap::new()) }
    }

    /// Loads every session already stored under the data directory. Returns
    /// one warning per session that could not be loaded.
    pub fn load_existing(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let Ok(entries) = std::fs::read_dir(&self.data_dir) else { return warnings };
        let mut ids: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|id| SessionStore::exists(&self.data_dir, id))
            .collect();
        ids.sort();
        for id in ids {
            match self.load_one(&id) {
                Ok(w) => warnings.extend(w),
                Err(e) => warnings.push(format!("session {id}: {e}")),
            }
        }
        warnings
    }

    fn load_one(&self, id: &str) -> Result<Vec<String>, String> {
        let (store, session) = SessionStore::open(&self.data_dir, id).map_err(|e| e.to_string())?;
        let provider = store
            .config_snapshot()
            .and_then(|c| serde_json::from_value::<SessionConfig>(c).ok())
            .and_then(|c| c.provider)
            .unwrap_or(ProviderConfig::Mock);
        let completer = build_provider(&provider).map_err(|e| e.to_string())?;
        let warnings = store.warnings().to_vec();
        let handle = SessionHandle::new(session, store, completer);
        self.sessions.write().expect("sessions lock").insert(id.to_string(), handle);
        Ok(warnings)
    }

    fn handle(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self { status, error, message: message.into(), fields: Vec::new() }
    }

    fn not_found(what: String) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::NotFound(what) => ApiError::not_found(what),
            EngineError::Finalized => ApiError::new(StatusCode::CONFLICT, "finalized", message),
            EngineError::PendingQuestions(_) => ApiError::new(StatusCode::CONFLICT, "pending_questions", message),
            EngineError::Validation(v) => ApiError {
                fields: vec![FieldError { field: v.field, message: v.message }],
                ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
            },
            EngineError::Config(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "config", message),
            EngineError::Backend(_) => ApiError::new(StatusCode::BAD_GATEWAY, "backend_unavailable", message),
            EngineError::Replay(_) => ApiError::internal(message),
        }
    }
}

impl From<DriveError> for ApiError {
    fn from(e: DriveError) -> Self {
        match e {
            DriveError::Engine(e) => e.into(),
            DriveError::Store(e) => e.into(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        ApiError {
            fields: e.fields(),
            ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub round: String,
    pub asset_class: String,
    pub oos: bool,
    pub snippet_titles: Vec<String>,
    pub questions: usize,
    pub pending_question_ids: Vec<String>,
    pub answers: usize,
    pub rows: usize,
    pub reports: Vec<RoundReport>,
    pub last_seq: u64,
}

impl SessionSummary {
    pub fn of(s: &Session) -> Self {
        Self {
            session_id: s.id().into(),
            round: s.round().as_str().into(),
            asset_class: s.context().asset_class.clone(),
            oos: s.context().oos,
            snippet_titles: s.context().snippets.iter().map(|x| x.title.clone()).collect(),
            questions: s.questions().len(),
            pending_question_ids: s.pending_ids(),
            answers: s.answers().len(),
            rows: s.rows().len(),
            reports: s.reports().to_vec(),
            last_seq: s.events().len() as u64,
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<BTreeMap<&'static str, String>>> {
    let handles: Vec<(String, Arc<SessionHandle>)> =
        state.sessions.read().expect("sessions lock").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut out: Vec<BTreeMap<&'static str, String>> = handles
        .into_iter()
        .map(|(id, h)| {
            let s = h.snapshot();
            BTreeMap::from([("session_id", id), ("round", s.round().as_str().to_string())])
        })
        .collect();
    out.sort_by(|a, b| a["session_id"].cmp(&b["session_id"]));
    Json(out)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(config): Json<SessionConfig>,
) -> Result<(StatusCode, Json<SessionSummary>), ApiError> {
    let st = state.clone();
    let handle = blocking(move || -> Result<Arc<SessionHandle>, ApiError> {
        let prepared = config.prepare(&st.base_dir)?;
        for w in &prepared.ingest.warnings {
            tracing::warn!(warning = %w, "knowledge repository");
        }
        let completer = build_provider(&prepared.provider).map_err(EngineError::Backend)?;
        let id = uuid::Uuid::new_v4().to_string();
        let session = Session::create(
            id,
            prepared.context,
            prepared.agents,
            prepared.templates,
            prepared.settings,
            &prepared.seed_questions,
        )?;
        let snapshot = serde_json::to_value(&config).map_err(|e| ApiError::internal(e.to_string()))?;
        let store = SessionStore::create(&st.data_dir, &session, Some(&snapshot))?;
        Ok(SessionHandle::new(session, store, completer))
    })
    .await??;
    let summary = SessionSummary::of(&handle.snapshot());
    state.sessions.write().expect("sessions lock").insert(summary.session_id.clone(), handle);
    tracing::info!(session_id = %summary.session_id, "session created");
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionSummary>, ApiError> {
    Ok(Json(SessionSummary::of(&state.handle(&id)?.snapshot())))
}

async fn advance(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<RoundReport>, ApiError> {
    let handle = state.handle(&id)?;
    let guard = handle.worker.clone().lock_owned().await;
    let h = handle.clone();
    let report = blocking(move || {
        let mut guard = guard;
        let Worker { session, store, completer } = &mut *guard;
        let result = drive_round(session, store, completer.as_ref(), &mut |s| h.publish(s));
        h.publish(session);
        result
    })
    .await?;
    match &report {
        Ok(r) => tracing::info!(session_id = %id, round = r.round, answers_accepted = r.answers_accepted, "round completed"),
        Err(e) => tracing::warn!(session_id = %id, error = %e, "advance failed"),
    }
    Ok(Json(report?))
}

#[derive(Debug, Deserialize)]
pub struct FormatQuery {
    format: Option<String>,
}

async fn export(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ApiError> {
    let format: ExportFormat = q.format.as_deref().unwrap_or("csv").parse().map_err(ApiError::bad_request)?;
    let session = state.handle(&id)?.snapshot();
    let bytes = export_fmea(session.rows(), format);
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes).into_response())
}

#[derive(Debug, Deserialize)]
pub struct BanksQuery {
    kind: Option<String>,
    limit: Option<usize>,
    offset: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BankPage {
    pub kind: BankKind,
    pub total: usize,
    pub offset: usize,
    pub records: Vec<serde_json::Value>,
}

async fn banks(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<BanksQuery>,
) -> Result<Json<BankPage>, ApiError> {
    let kind: BankKind = q.kind.as_deref().ok_or_else(|| ApiError::bad_request("kind is required"))?.parse().map_err(ApiError::bad_request)?;
    let session = state.handle(&id)?.snapshot();
    let all = folded_records(&session, kind);
    let offset = q.offset.unwrap_or(0);
    let records: Vec<serde_json::Value> = all.iter().skip(offset).take(q.limit.unwrap_or(usize::MAX)).cloned().collect();
    Ok(Json(BankPage { kind, total: all.len(), offset, records }))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    after: Option<u64>,
    timeout_ms: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventPage {
    pub events: Vec<EventRecord>,
    pub last_seq: u64,
}

pub const DEFAULT_POLL_TIMEOUT: Duration = Duration::from_secs(25);

async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<EventPage>, ApiError> {
    let handle = state.handle(&id)?;
    let after = q.after.unwrap_or(0);
    let mut rx = handle.seq.subscribe();
    let wait = q.timeout_ms.map_or(DEFAULT_POLL_TIMEOUT, Duration::from_millis);
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let session = handle.snapshot();
        let last_seq = session.events().len() as u64;
        if last_seq > after || tokio::time::Instant::now() >= deadline {
            let events = session.events().iter().filter(|e| e.seq > after).cloned().collect();
            return Ok(Json(EventPage { events, last_seq }));
        }
        if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
            continue;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Approve,
    Reject,
    Edit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewBody {
    pub action: ActionKind,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub edits: Option<RowEdits>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub row: FmeaRow,
    pub requeued_question_id: Option<String>,
    pub changed: bool,
}

async fn review(
    State(state): State<Arc<AppState>>,
    UrlPath((id, row_id)): UrlPath<(String, String)>,
    Json(body): Json<ReviewBody>,
) -> Result<Json<ReviewResponse>, ApiError> {
    let action = match body.action {
        ActionKind::Approve => ReviewAction::Approve,
        ActionKind::Reject => ReviewAction::Reject { comment: body.comment.unwrap_or_default() },
        ActionKind::Edit => ReviewAction::Edit { edits: body.edits.unwrap_or_default(), comment: body.comment },
    };
    let handle = state.handle(&id)?;
    let guard = handle.worker.clone().lock_owned().await;
    let h = handle.clone();
    let outcome = blocking(move || -> Result<ReviewResponse, ApiError> {
        let mut guard = guard;
        let Worker { session, store, .. } = &mut *guard;
        let outcome = session.incorporate_feedback(&row_id, action)?;
        store.persist(session)?;
        h.publish(session);
        Ok(ReviewResponse { row: outcome.row, requeued_question_id: outcome.requeued_question_id, changed: outcome.changed })
    })
    .await??;
    Ok(Json(outcome))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/fmea", get(export))
        .route("/sessions/{id}/banks", get(banks))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/rows/{rid}/review", post(review))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Starts the service on a background thread with its own runtime. Returns
/// the bound address.
pub fn spawn(addr: &str, data_dir: &Path, base_dir: &Path) -> std::io::Result<std::net::SocketAddr> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let state = Arc::new(AppState::new(data_dir.to_path_buf(), base_dir.to_path_buf()));
    for w in state.load_existing() {
        tracing::warn!(warning = %w, "loading sessions");
    }
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            serve(listener, state).await.expect("serve");
        });
    });
    Ok(local)
}
