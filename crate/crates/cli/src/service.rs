//! Local HTTP API over one project file.
//!
//! Reads take a snapshot of the current project. Mutations are serialized
//! by a single writer lock and persisted before they are acknowledged.
//! Alignment runs as the one exclusive job; while it is in flight every
//! other mutation is refused with 409 instead of waiting silently.

use std::collections::HashMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use forensic3d::cloud::{align, cloud_distance, ply_bytes, read_ply, CloudError, CorrespondenceSet, IcpParams, PlyFormat, PointCloud};
use forensic3d::geometry::Point3;
use forensic3d::scene::{generate_report, save_project, AlignmentRecord, Project, ReportFormat, SceneError};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::now_utc;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn not_found(what: String) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    fn internal(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<SceneError> for ApiError {
    fn from(e: SceneError) -> Self {
        let status = match e {
            SceneError::NotFound(_) => StatusCode::NOT_FOUND,
            SceneError::InvalidInput(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<CloudError> for ApiError {
    fn from(e: CloudError) -> Self {
        let status = match e {
            CloudError::Io { .. } | CloudError::MalformedHeader(_) | CloudError::TruncatedBody(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn busy(job: &str) -> ApiError {
    ApiError::new(
        StatusCode::CONFLICT,
        "busy",
        format!("'{job}' is running; retry when /api/status reports idle"),
    )
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct JobStatus {
    pub busy: bool,
    pub job: Option<String>,
    pub completed_jobs: u64,
}

pub struct AppState {
    project_path: PathBuf,
    project: RwLock<Arc<Project>>,
    writer: tokio::sync::Mutex<()>,
    job: Mutex<Option<String>>,
    completed_jobs: AtomicU64,
    clouds: Mutex<HashMap<usize, Arc<PointCloud>>>,
    icp: IcpParams,
}

/// Marks the exclusive job as running until dropped.
pub struct JobGuard {
    state: Arc<AppState>,
}

impl Drop for JobGuard {
    fn drop(&mut self) {
        *self.state.job.lock().unwrap() = None;
        self.state.completed_jobs.fetch_add(1, Ordering::SeqCst);
    }
}

impl AppState {
    pub fn open(project_path: &FsPath, icp: IcpParams) -> Result<Arc<AppState>, SceneError> {
        let project = forensic3d::scene::load_project(project_path)?;
        Ok(Arc::new(AppState {
            project_path: project_path.to_path_buf(),
            project: RwLock::new(Arc::new(project)),
            writer: tokio::sync::Mutex::new(()),
            job: Mutex::new(None),
            completed_jobs: AtomicU64::new(0),
            clouds: Mutex::new(HashMap::new()),
            icp,
        }))
    }

    pub fn snapshot(&self) -> Arc<Project> {
        self.project.read().unwrap().clone()
    }

    pub fn status(&self) -> JobStatus {
        let job = self.job.lock().unwrap().clone();
        JobStatus {
            busy: job.is_some(),
            job,
            completed_jobs: self.completed_jobs.load(Ordering::SeqCst),
        }
    }

    /// Claim the exclusive job slot; `None` when a job is already running.
    pub fn begin_job(self: &Arc<Self>, name: &str) -> Option<JobGuard> {
        let mut job = self.job.lock().unwrap();
        if job.is_some() {
            return None;
        }
        *job = Some(name.to_string());
        Some(JobGuard { state: self.clone() })
    }

    fn ensure_idle(&self) -> ApiResult<()> {
        match &*self.job.lock().unwrap() {
            Some(job) => Err(busy(job)),
            None => Ok(()),
        }
    }

    /// Apply a mutation to a copy of the project, persist it, then publish.
    async fn mutate<T>(&self, f: impl FnOnce(&mut Project) -> Result<T, ApiError>) -> ApiResult<T> {
        let _writer = self.writer.lock().await;
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        save_project(&next, &self.project_path)?;
        *self.project.write().unwrap() = Arc::new(next);
        Ok(out)
    }

    fn cloud_path(&self, rel: &str) -> PathBuf {
        let base = self.project_path.parent().unwrap_or(FsPath::new("."));
        base.join(rel)
    }

    /// Load a cloud by project id, cached after the first read.
    fn load_cloud(&self, id: usize) -> ApiResult<Arc<PointCloud>> {
        if let Some(c) = self.clouds.lock().unwrap().get(&id) {
            return Ok(c.clone());
        }
        let project = self.snapshot();
        let record = project.cloud(id).ok_or_else(|| ApiError::not_found(format!("cloud {id}")))?;
        let cloud = Arc::new(read_ply(&self.cloud_path(&record.path))?);
        self.clouds.lock().unwrap().insert(id, cloud.clone());
        Ok(cloud)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/status", get(status))
        .route("/api/project", get(project))
        .route("/api/clouds", get(clouds))
        .route("/api/clouds/{id}", get(cloud))
        .route("/api/alignments", post(create_alignment))
        .route("/api/annotations", post(create_annotation))
        .route("/api/annotations/{id}", delete(delete_annotation))
        .route("/api/measurements", post(create_measurement))
        .route("/api/report", get(report))
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "version": env!("CARGO_PKG_VERSION"), "project": s.snapshot().name }))
}

async fn status(State(s): State<Arc<AppState>>) -> Json<JobStatus> {
    Json(s.status())
}

async fn project(State(s): State<Arc<AppState>>) -> Json<Project> {
    Json((*s.snapshot()).clone())
}

#[derive(Serialize)]
struct CloudSummary {
    id: usize,
    point_count: usize,
    source: String,
}

async fn clouds(State(s): State<Arc<AppState>>) -> Json<Vec<CloudSummary>> {
    let list = s
        .snapshot()
        .clouds
        .iter()
        .map(|c| CloudSummary {
            id: c.id,
            point_count: c.point_count,
            source: c.source.clone(),
        })
        .collect();
    Json(list)
}

async fn cloud(State(s): State<Arc<AppState>>, Path(id): Path<usize>) -> ApiResult<Response> {
    let c = s.load_cloud(id)?;
    let bytes = ply_bytes(&c, PlyFormat::BinaryLittleEndian)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignmentRequest {
    data_id: usize,
    model_id: usize,
    correspondences: Vec<(usize, usize)>,
    #[serde(default = "default_true")]
    with_scale: bool,
}

fn default_true() -> bool {
    true
}

/// Runs rough alignment and ICP as the exclusive job, records the result and
/// returns it. Disjoint clouds are not an error: the result carries
/// `no_overlap: true`.
async fn create_alignment(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: AlignmentRequest = parse_body(&body)?;
    let Some(guard) = s.begin_job("alignment") else {
        return Err(busy(s.status().job.as_deref().unwrap_or("a job")));
    };
    let data = s.load_cloud(req.data_id)?;
    let model = s.load_cloud(req.model_id)?;
    let corr = CorrespondenceSet::new(req.correspondences.clone());
    let icp = s.icp;
    let with_scale = req.with_scale;
    let (result, distance) = tokio::task::spawn_blocking(move || {
        let result = align(&data, &model, &corr, with_scale, &icp)?;
        let distance = cloud_distance(&data.transformed(&result.transform), &model)?;
        Ok::<_, CloudError>((result, distance))
    })
    .await
    .map_err(|e| ApiError::internal("job_failed", e.to_string()))??;
    let record = AlignmentRecord {
        data_id: req.data_id,
        model_id: req.model_id,
        correspondences: req.correspondences,
        with_scale,
        result: result.clone(),
        cloud_distance: Some(distance),
    };
    s.mutate(|p| {
        p.alignments.push(record);
        Ok(())
    })
    .await?;
    drop(guard);
    Ok(Json(result).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRequest {
    anchor: Point3,
    label: String,
    author: String,
    #[serde(default)]
    comment: String,
}

async fn create_annotation(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: AnnotationRequest = parse_body(&body)?;
    s.ensure_idle()?;
    let ts = now_utc();
    let a = s
        .mutate(|p| Ok(p.add_annotation(req.anchor, &req.label, &req.author, &req.comment, &ts)?))
        .await?;
    Ok((StatusCode::CREATED, Json(a)).into_response())
}

async fn delete_annotation(State(s): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Response> {
    s.ensure_idle()?;
    let a = s.mutate(|p| Ok(p.delete_annotation(id)?)).await?;
    Ok(Json(a).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementRequest {
    p1: Option<Point3>,
    p2: Option<Point3>,
    /// Two annotation ids instead of explicit points.
    annotations: Option<(u64, u64)>,
}

async fn create_measurement(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: MeasurementRequest = parse_body(&body)?;
    s.ensure_idle()?;
    let m = match (req.p1, req.p2, req.annotations) {
        (Some(a), Some(b), None) => s.mutate(|p| Ok(p.measure(a, b)?)).await?,
        (None, None, Some((a, b))) => s.mutate(|p| Ok(p.measure_annotations(a, b)?)).await?,
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "malformed_body",
                "give either p1 and p2 or annotations",
            ))
        }
    };
    Ok((StatusCode::CREATED, Json(m)).into_response())
}

#[derive(Deserialize)]
struct ReportQuery {
    format: Option<String>,
    /// Timestamp printed in the report; the current time when absent.
    generated: Option<String>,
}

async fn report(State(s): State<Arc<AppState>>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let format: ReportFormat = q
        .format
        .as_deref()
        .unwrap_or("html")
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_format", e))?;
    let generated = q.generated.unwrap_or_else(now_utc);
    let doc = generate_report(&s.snapshot(), format, &generated);
    let content_type = match format {
        ReportFormat::Txt => "text/plain; charset=utf-8",
        ReportFormat::Html => "text/html; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], doc).into_response())
}

/// Serve until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
