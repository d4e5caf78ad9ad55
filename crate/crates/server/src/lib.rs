//! Annotation sessions over HTTP, mounted under `/api/v1`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use owr_core::annotate::{AnnotationSession, Edit, InstancePage, SessionSnapshot};
use owr_core::discover::PartitionFile;
use owr_core::ingest::{read_archive, write_archive_with, Dtype};
use owr_core::{ClassId, Error, FeatureSet};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE_SIZE: usize = 50;

type Shared = Arc<RwLock<AnnotationSession>>;

/// Open sessions plus the directory committed archives go to.
pub struct AppState {
    out_dir: PathBuf,
    sessions: RwLock<HashMap<String, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(out_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self { out_dir: out_dir.into(), sessions: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1) })
    }

    /// Open a session from a partition JSON or a cluster-labeled archive.
    pub async fn open(&self, partition_ref: &Path, known: Option<BTreeSet<ClassId>>) -> Result<String, ApiError> {
        let (zhat, known) = load_partition(partition_ref, known)?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = tokio::task::spawn_blocking({
            let id = id.clone();
            move || AnnotationSession::open(id, &zhat, known)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
        self.sessions.write().await.insert(id.clone(), Arc::new(RwLock::new(session)));
        tracing::info!(session = %id, "session opened");
        Ok(id)
    }

    async fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")).into())
    }
}

fn load_partition(path: &Path, known: Option<BTreeSet<ClassId>>) -> Result<(FeatureSet, BTreeSet<ClassId>), Error> {
    if path.extension().is_some_and(|e| e == "json") {
        let pf = PartitionFile::load(path)?;
        let known = known.unwrap_or_else(|| pf.known.clone());
        return Ok((pf.zhat()?, known));
    }
    let fs = read_archive(path)?;
    fs.require_labels()?;
    Ok((fs, known.unwrap_or_default()))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/clusters/{cid}/instances", get(get_instances))
        .route("/sessions/{id}/edits", post(post_edit))
        .route("/sessions/{id}/commit", post(post_commit));
    Router::new().nest("/api/v1", api).with_state(state)
}

/// `router` plus a static bundle served from `/`.
pub fn router_with_static(state: Arc<AppState>, dir: &Path) -> Router {
    router(state).fallback_service(ServeDir::new(dir))
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub partition_ref: PathBuf,
    #[serde(default)]
    pub known: Option<BTreeSet<ClassId>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub page: usize,
    pub page_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NewClass {
    pub class_id: ClassId,
    pub name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommitResponse {
    pub archive_path: PathBuf,
    pub new_classes: Vec<NewClass>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let Json(body) = body?;
    let session_id = app.open(&body.partition_ref, body.known).await?;
    Ok((StatusCode::CREATED, Json(Created { session_id })))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionSnapshot>, ApiError> {
    let s = app.session(&id).await?;
    let snap = s.read().await.snapshot();
    Ok(Json(snap))
}

async fn get_instances(
    State(app): State<Arc<AppState>>,
    UrlPath((id, cid)): UrlPath<(String, ClassId)>,
    Query(q): Query<PageQuery>,
) -> Result<Json<InstancePage>, ApiError> {
    let s = app.session(&id).await?;
    let page = s.read().await.instances(cid, q.page, q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?;
    Ok(Json(page))
}

async fn post_edit(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    edit: Result<Json<Edit>, JsonRejection>,
) -> Result<Json<SessionSnapshot>, ApiError> {
    let Json(edit) = edit?;
    let s = app.session(&id).await?;
    let mut guard = s.write().await;
    guard.apply(edit)?;
    Ok(Json(guard.snapshot()))
}

async fn post_commit(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<CommitResponse>, ApiError> {
    let s = app.session(&id).await?;
    let mut guard = s.write().await;
    let unlabeled = guard.progress().unlabeled_clusters;
    let commit = guard.commit().map_err(|e| ApiError::from(e).with_clusters(unlabeled))?;
    let names: BTreeMap<ClassId, String> =
        commit.new_classes.iter().filter_map(|(c, n)| n.clone().map(|n| (*c, n))).collect();
    let path = app.out_dir.join(format!("{id}.owr"));
    let meta = BTreeMap::from([("session_id".to_string(), serde_json::Value::from(id.clone()))]);
    std::fs::create_dir_all(&app.out_dir).map_err(Error::from)?;
    write_archive_with(&commit.z_n, &path, Dtype::F64, (!names.is_empty()).then_some(names), meta)?;
    let new_classes = commit.new_classes.into_iter().map(|(class_id, name)| NewClass { class_id, name }).collect();
    Ok(Json(CommitResponse { archive_path: path, new_classes }))
}

/// JSON error body: `{"error": kind, "message": ..., "clusters": [...]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<ClassId>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn internal(message: String) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { error: "internal".into(), message, clusters: Vec::new() },
        }
    }

    fn with_clusters(mut self, clusters: Vec<ClassId>) -> Self {
        if self.body.error == "validation" {
            self.body.clusters = clusters;
        }
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::InvalidArgument(_) | Error::Format { .. } | Error::Truncated { .. } | Error::Json(_) => {
                (StatusCode::BAD_REQUEST, "invalid_argument")
            }
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            Error::State(_) => (StatusCode::CONFLICT, "state"),
            Error::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            Error::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        };
        Self { status, body: ErrorBody { error: kind.into(), message: e.to_string(), clusters: Vec::new() } }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody { error: "invalid_argument".into(), message: r.body_text(), clusters: Vec::new() },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Bind `addr` and serve until the process is stopped.
pub async fn serve(app: Router, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation server listening");
    axum::serve(listener, app).await
}
