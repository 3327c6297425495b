//! HTTP/JSON API over the grouping pipeline and refinement sessions.
//!
//! Every document owns a session slot. Mutations (run, constraints, refine,
//! edits) queue on a per-slot FIFO lock and run on the blocking pool; reads
//! serve the last published snapshot and never wait for a mutation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use docgroup_core::config::PipelineConfig;
use docgroup_core::document::DocumentModel;
use docgroup_core::edits::{apply_edit, render_svg, EditLog, EditSpec};
use docgroup_core::pipeline::run_pipeline;
use docgroup_core::refine::{write_atomic, RefineSession, UserSelection};
use docgroup_core::Error;

const DOCUMENT_FILE: &str = "document.json";
const EDITS_FILE: &str = "edits.json";
const SESSION_DIR: &str = "session";
const RENDER_WIDTH: f64 = 800.0;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Master seed for runs whose overrides do not set one.
    pub seed: u64,
    /// Run and refine calls slower than this answer 202 with a job handle.
    pub sync_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, seed: u64) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            seed,
            sync_timeout: Duration::from_secs(120),
        }
    }
}

/// Error body: `{code, message, field}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        ApiError {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            field: field.map(str::to_string),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", format!("unknown document `{id}`"), Some("doc_id"))
    }

    fn not_run(id: &str) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "NOT_RUN",
            format!("document `{id}` has not been run yet"),
            None,
        )
    }

    fn in_flight(id: &str) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "IN_FLIGHT",
            format!("a run or refinement of `{id}` is still in flight"),
            None,
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message, None)
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let unprocessable = StatusCode::UNPROCESSABLE_ENTITY;
        let message = err.to_string();
        match &err {
            Error::Parse { field, .. } => Self::new(unprocessable, "PARSE", message, Some(field)),
            Error::Validation { field, .. } => Self::new(unprocessable, "VALIDATION", message, Some(field)),
            Error::Contradiction(..) => Self::new(unprocessable, "CONTRADICTION", message, Some("selections")),
            Error::UnknownCluster(_) => Self::new(unprocessable, "UNKNOWN_CLUSTER", message, Some("cluster_id")),
            Error::DimensionMismatch { .. } | Error::LayoutOverflow(_) => {
                Self::new(unprocessable, "VALIDATION", message, None)
            }
            Error::NonFiniteLoss { .. } | Error::Checkpoint(_) | Error::Io(_) => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Bodies served by the read endpoints, rebuilt after each mutation.
#[derive(Debug)]
struct Published {
    clusters: String,
    projection: String,
    svg: String,
}

#[derive(Clone, Debug)]
struct SlotData {
    doc: DocumentModel,
    session: Option<Arc<RefineSession>>,
    edits: EditLog,
}

#[derive(Debug)]
struct Slot {
    id: String,
    dir: PathBuf,
    queue: Arc<tokio::sync::Mutex<()>>,
    running: AtomicBool,
    data: RwLock<SlotData>,
    published: RwLock<Arc<Published>>,
}

impl Slot {
    fn snapshot(&self) -> SlotData {
        self.data.read().expect("slot lock").clone()
    }

    fn published(&self) -> Arc<Published> {
        self.published.read().expect("slot lock").clone()
    }

    fn persist(&self, data: &SlotData) -> docgroup_core::Result<()> {
        fs::create_dir_all(&self.dir)?;
        write_atomic(&self.dir.join(DOCUMENT_FILE), data.doc.to_json_string().as_bytes())?;
        write_atomic(&self.dir.join(EDITS_FILE), serde_json::to_string(&data.edits)?.as_bytes())?;
        if let Some(session) = &data.session {
            session.save(&self.dir.join(SESSION_DIR))?;
        }
        Ok(())
    }

    /// Swaps in new state; readers see either the old or the new snapshot.
    fn publish(&self, data: SlotData) -> docgroup_core::Result<()> {
        let published = Arc::new(publish_bodies(&data)?);
        *self.data.write().expect("slot lock") = data;
        *self.published.write().expect("slot lock") = published;
        Ok(())
    }
}

fn publish_bodies(data: &SlotData) -> docgroup_core::Result<Published> {
    let doc = data.session.as_ref().map_or(&data.doc, |s| &s.doc);
    let page = (RENDER_WIDTH, RENDER_WIDTH / doc.aspect_ratio);
    Ok(match &data.session {
        Some(s) => Published {
            clusters: s.assignment.to_json(),
            projection: serde_json::to_string_pretty(&s.projection_payload())?,
            svg: render_svg(&s.doc, Some(&s.assignment), page)?,
        },
        None => Published {
            clusters: String::new(),
            projection: String::new(),
            svg: render_svg(doc, None, page)?,
        },
    })
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Running { doc_id: String },
    Done { doc_id: String, result: Value },
    Failed { doc_id: String, error: ApiError },
}

#[derive(Debug)]
struct Store {
    cfg: ServiceConfig,
    slots: Mutex<BTreeMap<String, Arc<Slot>>>,
    next_doc: AtomicU64,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
    next_job: AtomicU64,
}

/// Shared application state; cheap to clone.
#[derive(Clone, Debug)]
pub struct AppState {
    store: Arc<Store>,
}

impl AppState {
    /// Opens the data directory and restores every persisted session.
    pub fn open(cfg: ServiceConfig) -> docgroup_core::Result<Self> {
        fs::create_dir_all(&cfg.data_dir)?;
        let mut slots = BTreeMap::new();
        let mut max_id = 0;
        let mut dirs: Vec<PathBuf> = fs::read_dir(&cfg.data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(DOCUMENT_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if let Some(n) = id.strip_prefix("doc-").and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            let slot = load_slot(&id, &dir)?;
            log::info!("restored document {id}");
            slots.insert(id, Arc::new(slot));
        }
        Ok(AppState {
            store: Arc::new(Store {
                cfg,
                slots: Mutex::new(slots),
                next_doc: AtomicU64::new(max_id + 1),
                jobs: Mutex::new(BTreeMap::new()),
                next_job: AtomicU64::new(1),
            }),
        })
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.store
            .slots
            .lock()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.store.cfg
    }
}

fn load_slot(id: &str, dir: &Path) -> docgroup_core::Result<Slot> {
    let doc = DocumentModel::from_json_bytes(&fs::read(dir.join(DOCUMENT_FILE))?)?;
    let edits = match fs::read(dir.join(EDITS_FILE)) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => EditLog::default(),
    };
    let session_dir = dir.join(SESSION_DIR);
    let session = if session_dir.is_dir() {
        Some(Arc::new(RefineSession::load(&session_dir)?))
    } else {
        None
    };
    let data = SlotData { doc, session, edits };
    let published = publish_bodies(&data)?;
    Ok(Slot {
        id: id.to_string(),
        dir: dir.to_path_buf(),
        queue: Arc::new(tokio::sync::Mutex::new(())),
        running: AtomicBool::new(false),
        data: RwLock::new(data),
        published: RwLock::new(Arc::new(published)),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/documents", post(create_document))
        .route("/documents/{id}/run", post(run_document))
        .route("/documents/{id}/clusters", get(get_clusters))
        .route("/documents/{id}/projection", get(get_projection))
        .route("/documents/{id}/constraints", post(post_constraints))
        .route("/documents/{id}/refine", post(post_refine))
        .route("/documents/{id}/edits", post(post_edit))
        .route("/documents/{id}/render.svg", get(get_render))
        .route("/jobs/{job_id}", get(get_job))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes, empty: impl FnOnce() -> T) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(empty());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::from(Error::from(e)))
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn create_document(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let doc = DocumentModel::from_json_bytes(&body)?;
    let store = &state.store;
    let id = format!("doc-{}", store.next_doc.fetch_add(1, Ordering::SeqCst));
    let dir = store.cfg.data_dir.join(&id);
    let data = SlotData {
        doc,
        session: None,
        edits: EditLog::default(),
    };
    let slot = Slot {
        id: id.clone(),
        dir,
        queue: Arc::new(tokio::sync::Mutex::new(())),
        running: AtomicBool::new(false),
        published: RwLock::new(Arc::new(publish_bodies(&data)?)),
        data: RwLock::new(data.clone()),
    };
    slot.persist(&data)?;
    let words = data.doc.words.len();
    store.slots.lock().expect("store lock").insert(id.clone(), Arc::new(slot));
    Ok((StatusCode::CREATED, Json(json!({ "doc_id": id, "words": words })) ).into_response())
}

/// Clears the in-flight flag when a run or refinement finishes or fails.
struct RunningGuard(Arc<Slot>);

impl Drop for RunningGuard {
    fn drop(&mut self) {
        self.0.running.store(false, Ordering::SeqCst);
    }
}

/// Runs `op` on a copy of the slot state behind the slot's FIFO queue,
/// then persists and publishes the result. Exclusive operations are
/// refused while another exclusive one is in flight and answer 202 with a
/// job handle when they outlast the synchronous timeout.
async fn mutate<F>(state: &AppState, slot: Arc<Slot>, exclusive: bool, op: F) -> ApiResult<Response>
where
    F: FnOnce(&mut SlotData) -> ApiResult<Value> + Send + 'static,
{
    let guard = if exclusive {
        if slot.running.swap(true, Ordering::SeqCst) {
            return Err(ApiError::in_flight(&slot.id));
        }
        Some(RunningGuard(slot.clone()))
    } else {
        None
    };
    let queue = slot.queue.clone().lock_owned().await;
    let worker = slot.clone();
    let handle = tokio::task::spawn_blocking(move || {
        let _queue = queue;
        let _guard = guard;
        let mut data = worker.snapshot();
        let value = op(&mut data)?;
        worker.persist(&data)?;
        worker.publish(data)?;
        Ok::<Value, ApiError>(value)
    });
    let joined = async move {
        match handle.await {
            Ok(r) => r,
            Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
        }
    };
    if !exclusive {
        return joined.await.map(|v| Json(v).into_response());
    }
    let mut joined = Box::pin(joined);
    match tokio::time::timeout(state.store.cfg.sync_timeout, &mut joined).await {
        Ok(r) => r.map(|v| Json(v).into_response()),
        Err(_) => {
            let store = state.store.clone();
            let job_id = format!("job-{}", store.next_job.fetch_add(1, Ordering::SeqCst));
            let doc_id = slot.id.clone();
            store
                .jobs
                .lock()
                .expect("jobs lock")
                .insert(job_id.clone(), JobStatus::Running { doc_id: doc_id.clone() });
            let key = job_id.clone();
            tokio::spawn(async move {
                let status = match joined.await {
                    Ok(result) => JobStatus::Done { doc_id, result },
                    Err(error) => JobStatus::Failed { doc_id, error },
                };
                store.jobs.lock().expect("jobs lock").insert(key, status);
            });
            Ok((
                StatusCode::ACCEPTED,
                Json(json!({ "job_id": job_id, "status_url": format!("/jobs/{job_id}") })),
            )
                .into_response())
        }
    }
}

fn session_of(data: &SlotData, id: &str) -> ApiResult<RefineSession> {
    data.session.as_deref().cloned().ok_or_else(|| ApiError::not_run(id))
}

async fn run_document(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    let overrides: serde_json::Map<String, Value> = parse_body(&body, serde_json::Map::new)?;
    let mut cfg = PipelineConfig::with_seed(state.store.cfg.seed);
    cfg.apply_json(&overrides)?;
    cfg.validate()?;
    mutate(&state, slot, true, move |data| {
        let pipeline = run_pipeline(data.doc.clone(), &cfg)?;
        let report = pipeline.report();
        data.session = Some(Arc::new(RefineSession::from(pipeline)));
        Ok(serde_json::to_value(report).map_err(Error::from)?)
    })
    .await
}

fn require_run(slot: &Slot) -> ApiResult<()> {
    if slot.data.read().expect("slot lock").session.is_none() {
        return Err(ApiError::not_run(&slot.id));
    }
    Ok(())
}

async fn get_clusters(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    require_run(&slot)?;
    Ok(json_response(StatusCode::OK, slot.published().clusters.clone()))
}

async fn get_projection(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    require_run(&slot)?;
    Ok(json_response(StatusCode::OK, slot.published().projection.clone()))
}

async fn get_render(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    Ok((
        StatusCode::OK,
        [(header::CONTENT_TYPE, "image/svg+xml")],
        slot.published().svg.clone(),
    )
        .into_response())
}

async fn post_constraints(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    require_run(&slot)?;
    let selections: Vec<UserSelection> = parse_body(&body, Vec::new)?;
    let doc_id = id.clone();
    mutate(&state, slot, false, move |data| {
        let mut session = session_of(data, &doc_id)?;
        let stats = session.add_selections(&selections)?;
        data.session = Some(Arc::new(session));
        Ok(serde_json::to_value(stats).map_err(Error::from)?)
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineBody {
    epochs: Option<usize>,
    /// Selections added in the same request, before training.
    #[serde(default)]
    selections: Vec<UserSelection>,
}

async fn post_refine(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    require_run(&slot)?;
    let body: RefineBody = parse_body(&body, RefineBody::default)?;
    if body.epochs.is_some_and(|e| e > 10_000) {
        return Err(Error::validation("epochs", "must be at most 10000").into());
    }
    let doc_id = id.clone();
    mutate(&state, slot, true, move |data| {
        let mut session = session_of(data, &doc_id)?;
        if !body.selections.is_empty() {
            session.add_selections(&body.selections)?;
        }
        let epochs = body.epochs.unwrap_or(session.config.refine_epochs);
        let record = session.refine(epochs)?.clone();
        data.session = Some(Arc::new(session));
        Ok(serde_json::to_value(record).map_err(Error::from)?)
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    cluster_id: usize,
    edit: EditSpec,
}

async fn post_edit(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    require_run(&slot)?;
    let body: EditBody = serde_json::from_slice(&body).map_err(Error::from)?;
    let doc_id = id.clone();
    mutate(&state, slot, false, move |data| {
        let mut session = session_of(data, &doc_id)?;
        let (doc, entry) = apply_edit(&session.doc, &session.assignment, body.cluster_id, &body.edit)?;
        session.replace_document(doc.clone())?;
        data.doc = doc;
        data.edits.push(entry.clone());
        data.session = Some(Arc::new(session));
        Ok(serde_json::to_value(entry).map_err(Error::from)?)
    })
    .await
}

async fn get_job(State(state): State<AppState>, UrlPath(job_id): UrlPath<String>) -> ApiResult<Response> {
    let jobs = state.store.jobs.lock().expect("jobs lock");
    match jobs.get(&job_id) {
        Some(status) => {
            let mut body = serde_json::to_value(status).map_err(|e| ApiError::internal(e.to_string()))?;
            body["job_id"] = Value::String(job_id.clone());
            Ok(Json(body).into_response())
        }
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "NOT_FOUND",
            format!("unknown job `{job_id}`"),
            Some("job_id"),
        )),
    }
}
