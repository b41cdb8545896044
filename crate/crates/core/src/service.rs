//! HTTP API over the dataset and the job queue, plus static UI hosting.
//!
//! All endpoints live under `/api`; responses are JSON unless they serve a
//! file. JSON shapes are published as schemas in `schemas/`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower_http::services::{ServeDir, ServeFile};

use crate::clean::{list_pending, resolve_review, CleanError, Decision, ReviewItem};
use crate::pipeline::{ConfigError, Job, JobQueue, JobTarget, PipelineConfig};
use crate::sampler::{BBox, GeoPoint};
use crate::satellite::Satellite;
use crate::store::{export_points_geojson, DatasetManifest, DatasetStore, Region, StoreError};

/// Published JSON schemas, by file name.
pub const SCHEMAS: &[(&str, &str)] = &[
    ("config.json", include_str!("../schemas/config.json")),
    ("error.json", include_str!("../schemas/error.json")),
    ("job.json", include_str!("../schemas/job.json")),
    ("job_created.json", include_str!("../schemas/job_created.json")),
    ("points.geojson.json", include_str!("../schemas/points.geojson.json")),
    ("review_item.json", include_str!("../schemas/review_item.json")),
    ("review_pending.json", include_str!("../schemas/review_pending.json")),
    ("scene.json", include_str!("../schemas/scene.json")),
    ("scenes.json", include_str!("../schemas/scenes.json")),
];

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// State shared by all handlers.
pub struct AppState {
    config: RwLock<PipelineConfig>,
    jobs: JobQueue,
}

impl AppState {
    pub fn new(config: PipelineConfig) -> Arc<Self> {
        Arc::new(Self { config: RwLock::new(config), jobs: JobQueue::start() })
    }

    pub fn config(&self) -> PipelineConfig {
        self.config.read().unwrap().clone()
    }

    pub fn jobs(&self) -> &JobQueue {
        &self.jobs
    }

    fn store(&self) -> Result<DatasetStore, ApiError> {
        let root = self.config.read().unwrap().output_root.clone();
        std::fs::create_dir_all(&root).map_err(|e| ApiError::internal(e.to_string()))?;
        DatasetStore::open(root).map_err(ApiError::from)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => Self::not_found(e.to_string()),
            StoreError::OutsideRoot(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        Self::bad_request(e.to_string())
    }
}

impl From<CleanError> for ApiError {
    fn from(e: CleanError) -> Self {
        let message = e.to_string();
        let status = match e {
            CleanError::UnknownItem(_) => StatusCode::NOT_FOUND,
            CleanError::AlreadyResolved(_) => StatusCode::CONFLICT,
            CleanError::InvalidDecision | CleanError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            CleanError::Store(s) => return s.into(),
            CleanError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, message)
    }
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

/// Manifest of the configured dataset; empty before the first stage runs.
fn manifest(state: &AppState) -> ApiResult<DatasetManifest> {
    Ok(state.store()?.load_or_default()?)
}

fn json_to_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(json_to_text).collect::<Vec<_>>().join(","),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, overrides: &BTreeMap<String, Value>) -> Result<(), ConfigError> {
    for (k, v) in overrides {
        cfg.set(k, &json_to_text(v))?;
    }
    cfg.validate()
}

#[derive(Debug, Deserialize)]
struct JobRequest {
    stage: JobTarget,
    #[serde(default)]
    overrides: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: u64,
}

async fn create_job(State(s): State<Shared>, body: Result<Json<JobRequest>, axum::extract::rejection::JsonRejection>) -> ApiResult<Json<JobCreated>> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut cfg = s.config();
    apply_overrides(&mut cfg, &req.overrides)?;
    Ok(Json(JobCreated { job_id: s.jobs.submit(req.stage, cfg) }))
}

async fn get_job(State(s): State<Shared>, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<Job>> {
    s.jobs.get(id).map(Json).ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}

async fn get_config(State(s): State<Shared>) -> Json<BTreeMap<String, String>> {
    Json(s.config().entries())
}

async fn put_config(
    State(s): State<Shared>,
    body: Result<Json<BTreeMap<String, Value>>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<BTreeMap<String, String>>> {
    let Json(values) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut guard = s.config.write().unwrap();
    let mut cfg = guard.clone();
    apply_overrides(&mut cfg, &values)?;
    *guard = cfg;
    Ok(Json(guard.entries()))
}

async fn points_geojson(State(s): State<Shared>) -> ApiResult<Response> {
    let body = blocking(move || Ok(export_points_geojson(&manifest(&s)?))).await?;
    Ok(([(header::CONTENT_TYPE, "application/geo+json")], body).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: u32,
    pub center: GeoPoint,
    pub bbox: BBox,
    pub overlaps: Vec<u32>,
    pub months_done: usize,
    pub unfavorable_count: usize,
    pub selected: usize,
    pub previews: BTreeMap<Satellite, String>,
}

fn summary(r: &Region) -> SceneSummary {
    SceneSummary {
        scene_id: r.scene_id,
        center: r.center,
        bbox: r.bbox,
        overlaps: r.overlaps.clone(),
        months_done: r.months_done(),
        unfavorable_count: r.unfavorable_count(),
        selected: r.months.iter().flat_map(|m| m.satellites.values()).filter(|sm| sm.selected.is_some()).count(),
        previews: r.previews.clone(),
    }
}

async fn scenes(State(s): State<Shared>) -> ApiResult<Json<Vec<SceneSummary>>> {
    blocking(move || Ok(Json(manifest(&s)?.regions.iter().map(summary).collect()))).await
}

fn find_region(m: DatasetManifest, id: u32) -> ApiResult<Region> {
    m.regions.into_iter().find(|r| r.scene_id == id).ok_or_else(|| ApiError::not_found(format!("no scene {id}")))
}

async fn scene(State(s): State<Shared>, UrlPath(id): UrlPath<u32>) -> ApiResult<Json<Region>> {
    blocking(move || find_region(manifest(&s)?, id).map(Json)).await
}

#[derive(Debug, Deserialize)]
struct PreviewQuery {
    satellite: Option<String>,
}

async fn scene_preview(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<u32>,
    Query(q): Query<PreviewQuery>,
) -> ApiResult<Response> {
    let satellite = match q.satellite {
        Some(v) => Some(v.parse::<Satellite>().map_err(|e| ApiError::bad_request(e.to_string()))?),
        None => None,
    };
    let bytes = blocking(move || {
        let store = s.store()?;
        let region = find_region(store.load_or_default()?, id)?;
        let rel = match satellite {
            Some(sat) => region.previews.get(&sat),
            None => region.previews.get(&Satellite::S2).or_else(|| region.previews.values().next()),
        }
        .ok_or_else(|| ApiError::not_found(format!("scene {id} has no preview yet")))?;
        std::fs::read(store.resolve(rel)?).map_err(|e| ApiError::not_found(format!("{rel}: {e}")))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn review_pending(State(s): State<Shared>) -> ApiResult<Json<Vec<ReviewItem>>> {
    blocking(move || Ok(Json(list_pending(&manifest(&s)?)))).await
}

#[derive(Debug, Deserialize)]
struct ReviewRequest {
    decision: Decision,
}

async fn review_decide(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ReviewRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<ReviewItem>> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let manual = s.config().clean.manual;
    if !manual {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "manual review is disabled (clean.manual = false)"));
    }
    blocking(move || Ok(Json(resolve_review(&s.store()?, &id, req.decision, manual)?))).await
}

#[derive(Debug, Serialize)]
struct DirEntry {
    name: String,
    dir: bool,
    size: u64,
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("tif" | "tiff") => "image/tiff",
        Some("json") => "application/json",
        Some("geojson") => "application/geo+json",
        Some("csv") => "text/csv",
        _ => "application/octet-stream",
    }
}

async fn files(State(s): State<Shared>, path: Option<UrlPath<String>>) -> ApiResult<Response> {
    let rel = path.map(|UrlPath(p)| p).unwrap_or_default();
    blocking(move || {
        let store = s.store()?;
        let target = if rel.is_empty() { store.root().to_path_buf() } else { store.resolve(&rel)? };
        let meta = std::fs::metadata(&target).map_err(|_| ApiError::not_found(format!("no such path `{rel}`")))?;
        if meta.is_dir() {
            let mut entries = Vec::new();
            for e in std::fs::read_dir(&target).map_err(|e| ApiError::internal(e.to_string()))? {
                let e = e.map_err(|e| ApiError::internal(e.to_string()))?;
                let name = e.file_name().to_string_lossy().into_owned();
                if name.starts_with('.') {
                    continue;
                }
                let m = e.metadata().map_err(|e| ApiError::internal(e.to_string()))?;
                entries.push(DirEntry { name, dir: m.is_dir(), size: if m.is_dir() { 0 } else { m.len() } });
            }
            entries.sort_by(|a, b| a.name.cmp(&b.name));
            return Ok(Json(entries).into_response());
        }
        let bytes = std::fs::read(&target).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(([(header::CONTENT_TYPE, content_type(&target))], Body::from(bytes)).into_response())
    })
    .await
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// The full application: `/api` plus the static UI when configured.
pub fn router(state: Shared) -> Router {
    let static_dir = state.config().static_dir;
    let api = Router::new()
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/config", get(get_config).put(put_config))
        .route("/points.geojson", get(points_geojson))
        .route("/scenes", get(scenes))
        .route("/scenes/{id}", get(scene))
        .route("/scenes/{id}/preview.png", get(scene_preview))
        .route("/review/pending", get(review_pending))
        .route("/review/{id}", post(review_decide))
        .route("/files", get(files))
        .route("/files/", get(files))
        .route("/files/{*path}", get(files))
        .fallback(api_not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app,
    }
}

/// A server running on a background thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()
}

/// Binds `addr` (port 0 picks a free port) and serves `app` in the background.
pub fn spawn(app: Router, addr: &str) -> Result<ServerHandle, ServiceError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| ServiceError::Bind { addr: addr.into(), source })?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let rt = runtime()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("forge-http".into()).spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                log::error!("server error: {e}");
            }
        });
    })?;
    Ok(ServerHandle { addr: local, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves `app` on `addr` until the process is interrupted.
pub fn run_blocking(app: Router, addr: &str, on_ready: impl FnOnce(SocketAddr)) -> Result<(), ServiceError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| ServiceError::Bind { addr: addr.into(), source })?;
    listener.set_nonblocking(true)?;
    on_ready(listener.local_addr()?);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schemas_are_json() {
        for (name, text) in SCHEMAS {
            let v: Value = serde_json::from_str(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(v.get("$schema").is_some(), "{name}");
        }
    }

    #[test]
    fn override_values_accept_json_scalars() {
        let mut cfg = PipelineConfig::default();
        let overrides: BTreeMap<String, Value> = serde_json::from_str(
            r#"{"clean.cloud_max": 0.1, "clean.manual": true, "download.satellites": ["s2"], "extract.stride": null}"#,
        )
        .unwrap();
        apply_overrides(&mut cfg, &overrides).unwrap();
        assert_eq!(cfg.clean.thresholds.cloud_max, 0.1);
        assert!(cfg.clean.manual);
        assert_eq!(cfg.plan.satellites, [Satellite::S2]);
        let bad: BTreeMap<String, Value> = serde_json::from_str(r#"{"clean.nope": 1}"#).unwrap();
        assert!(apply_overrides(&mut cfg, &bad).is_err());
    }

    #[test]
    fn busy_port_is_reported() {
        let first = spawn(Router::new(), "127.0.0.1:0").unwrap();
        let err = spawn(Router::new(), &first.addr().to_string()).err().unwrap();
        assert!(matches!(err, ServiceError::Bind { .. }));
    }
}
