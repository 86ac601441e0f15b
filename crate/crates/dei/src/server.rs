//! HTTP+JSON API over a [`Dei`], versioned under `/api/v1`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sloop_core::ensemble::{EnsembleWeights, RankedList};
use sloop_core::experiment::IterationMetrics;
use sloop_core::feedback::{CohortPartition, Label, PairKey};
use sloop_core::Error;
use tokio::sync::oneshot;

use crate::store::{Dei, ImageMetadata, TransitionRequest};

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

/// Stable error kind names shared by server and client.
pub fn error_kind(e: &Error) -> (&'static str, StatusCode) {
    match e {
        Error::Validation(_) | Error::Dimension(_) | Error::Insufficient(_) | Error::Decode(_) | Error::Json(_) => ("validation", StatusCode::UNPROCESSABLE_ENTITY),
        Error::NotFound(_) => ("not_found", StatusCode::NOT_FOUND),
        Error::Conflict(_) => ("conflict", StatusCode::CONFLICT),
        Error::Authentication(_) => ("authentication", StatusCode::UNAUTHORIZED),
        Error::Authorization(_) => ("authorization", StatusCode::FORBIDDEN),
        Error::Unavailable(_) => ("unavailable", StatusCode::SERVICE_UNAVAILABLE),
        Error::Corrupt(_) | Error::Io(_) => ("internal", StatusCode::INTERNAL_SERVER_ERROR),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (kind, status) = error_kind(&self.0);
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<Dei>>;

fn bearer(headers: &HeaderMap) -> Result<&str, ApiError> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError(Error::Authentication("bearer token required".into())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthRequest {
    pub principal: String,
    pub secret: String,
    pub capabilities: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UploadMetadata {
    pub species: String,
    #[serde(flatten)]
    pub metadata: ImageMetadata,
}

#[derive(Debug, Deserialize)]
struct MaxQuery {
    max: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct SpeciesQuery {
    species: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RankQuery {
    k: Option<usize>,
    view: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    annotator: Option<String>,
    max: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseBody {
    pub annotator: String,
    pub label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipBody {
    pub annotator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldBody {
    pub pair: PairKey,
    pub label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateTaskBody {
    pub pair: PairKey,
}

#[derive(Debug, Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn auth(State(d): Shared, Json(r): Json<AuthRequest>) -> ApiResult<serde_json::Value> {
    let s = d.authenticate(&r.principal, &r.secret, &r.capabilities)?;
    Ok(Json(serde_json::json!({ "token": s.session_id, "session": s })))
}

async fn upload(State(d): Shared, headers: HeaderMap, mut mp: Multipart) -> ApiResult<serde_json::Value> {
    let token = bearer(&headers)?.to_string();
    let mut blob: Option<Bytes> = None;
    let mut meta: Option<UploadMetadata> = None;
    while let Some(field) = mp.next_field().await.map_err(|e| Error::validation(e.to_string()))? {
        match field.name() {
            Some("blob") => blob = Some(field.bytes().await.map_err(|e| Error::validation(e.to_string()))?),
            Some("metadata") => {
                let b = field.bytes().await.map_err(|e| Error::validation(e.to_string()))?;
                meta = Some(serde_json::from_slice(&b).map_err(|e| Error::validation(format!("metadata: {e}")))?);
            }
            _ => {}
        }
    }
    let blob = blob.ok_or_else(|| Error::validation("multipart field blob missing"))?;
    let meta = meta.ok_or_else(|| Error::validation("multipart field metadata missing"))?;
    let id = d.put_image(&token, &blob, &meta.species, meta.metadata)?;
    Ok(Json(serde_json::json!({ "image_id": id })))
}

async fn list_images(State(d): Shared, Query(q): Query<SpeciesQuery>) -> ApiResult<Vec<crate::store::ImageRecord>> {
    Ok(Json(d.list_images(q.species.as_deref())))
}

async fn get_image(State(d): Shared, Path(id): Path<String>) -> ApiResult<crate::store::ImageRecord> {
    Ok(Json(d.get_image(&id)?))
}

async fn get_blob(State(d): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let b = d.get_blob(&id)?;
    let ct = if b.starts_with(b"P5") { "image/x-portable-graymap" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, ct)], b.as_ref().clone()).into_response())
}

async fn work(State(d): Shared, headers: HeaderMap, Query(q): Query<MaxQuery>) -> ApiResult<Vec<crate::store::WorkItem>> {
    Ok(Json(d.poll_work(bearer(&headers)?, q.max.unwrap_or(1))?))
}

async fn transition(State(d): Shared, headers: HeaderMap, Json(r): Json<TransitionRequest>) -> ApiResult<serde_json::Value> {
    let s = d.commit_transition(bearer(&headers)?, &r)?;
    Ok(Json(serde_json::json!({ "state": s })))
}

async fn get_rankings(State(d): Shared, Path(id): Path<String>, Query(q): Query<RankQuery>) -> ApiResult<RankedList> {
    let base = q.view.as_deref() == Some("base");
    Ok(Json(crate::api::DeiApi::rankings(d.as_ref(), &id, q.k, base)?))
}

async fn put_rankings(State(d): Shared, headers: HeaderMap, Path(id): Path<String>, Json(r): Json<RankedList>) -> ApiResult<serde_json::Value> {
    if r.query != id {
        return Err(Error::validation("ranking query does not match the path").into());
    }
    let token = bearer(&headers)?.to_string();
    let rref = tokio::task::spawn_blocking(move || d.put_scores(&token, &r))
        .await
        .map_err(|e| Error::Unavailable(e.to_string()))??;
    Ok(Json(serde_json::json!({ "ranking_ref": rref })))
}

async fn get_weights(State(d): Shared) -> ApiResult<Option<EnsembleWeights>> {
    Ok(Json(d.weights()))
}

async fn put_weights(State(d): Shared, headers: HeaderMap, Json(w): Json<EnsembleWeights>) -> ApiResult<serde_json::Value> {
    d.put_weights(bearer(&headers)?, w)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn get_tasks(State(d): Shared, headers: HeaderMap, Query(q): Query<TaskQuery>) -> ApiResult<Vec<sloop_core::feedback::VerificationTask>> {
    match q.annotator {
        Some(a) => Ok(Json(d.get_tasks(bearer(&headers)?, &a, q.max.unwrap_or(1))?)),
        None => Ok(Json(d.list_tasks())),
    }
}

async fn create_task(State(d): Shared, headers: HeaderMap, Json(b): Json<CreateTaskBody>) -> ApiResult<serde_json::Value> {
    let id = d.create_task(bearer(&headers)?, b.pair)?;
    Ok(Json(serde_json::json!({ "task_id": id })))
}

async fn get_task(State(d): Shared, Path(id): Path<u64>) -> ApiResult<sloop_core::feedback::VerificationTask> {
    Ok(Json(d.task(id)?))
}

async fn respond(State(d): Shared, headers: HeaderMap, Path(id): Path<u64>, Json(b): Json<ResponseBody>) -> ApiResult<sloop_core::feedback::SubmitOutcome> {
    Ok(Json(d.submit_response(bearer(&headers)?, id, &b.annotator, b.label)?))
}

async fn skip(State(d): Shared, headers: HeaderMap, Path(id): Path<u64>, Json(b): Json<SkipBody>) -> ApiResult<serde_json::Value> {
    d.skip_task(bearer(&headers)?, id, &b.annotator)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn gold(State(d): Shared, headers: HeaderMap, Json(b): Json<GoldBody>) -> ApiResult<serde_json::Value> {
    d.add_gold(bearer(&headers)?, b.pair, b.label)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn get_cohorts(State(d): Shared) -> ApiResult<CohortPartition> {
    Ok(Json(d.cohorts()))
}

async fn put_cohorts(State(d): Shared, headers: HeaderMap, Json(p): Json<CohortPartition>) -> ApiResult<serde_json::Value> {
    d.put_cohorts(bearer(&headers)?, p)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn get_metrics(State(d): Shared, Query(q): Query<FormatQuery>) -> Response {
    let m = d.metrics();
    if q.format.as_deref() == Some("csv") {
        ([(header::CONTENT_TYPE, "text/csv")], m.csv()).into_response()
    } else {
        Json(m).into_response()
    }
}

async fn push_metrics(State(d): Shared, headers: HeaderMap, Json(row): Json<IterationMetrics>) -> ApiResult<serde_json::Value> {
    d.push_metrics(bearer(&headers)?, row)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn get_workflow(State(d): Shared, Path(name): Path<String>) -> ApiResult<sloop_core::workflow::WorkflowDef> {
    Ok(Json(d.workflow(&name)?))
}

pub fn router(dei: Arc<Dei>) -> Router {
    Router::new()
        .route("/api/v1/auth", post(auth))
        .route("/api/v1/images", post(upload).get(list_images))
        .route("/api/v1/images/{id}", get(get_image))
        .route("/api/v1/images/{id}/blob", get(get_blob))
        .route("/api/v1/work", get(work))
        .route("/api/v1/transitions", post(transition))
        .route("/api/v1/rankings/{id}", get(get_rankings).put(put_rankings))
        .route("/api/v1/weights", get(get_weights).put(put_weights))
        .route("/api/v1/tasks", get(get_tasks).post(create_task))
        .route("/api/v1/tasks/{id}", get(get_task))
        .route("/api/v1/tasks/{id}/response", post(respond))
        .route("/api/v1/tasks/{id}/skip", post(skip))
        .route("/api/v1/gold", post(gold))
        .route("/api/v1/cohorts", get(get_cohorts).put(put_cohorts))
        .route("/api/v1/metrics", get(get_metrics).post(push_metrics))
        .route("/api/v1/workflows/{name}", get(get_workflow))
        .layer(DefaultBodyLimit::max(256 << 20))
        .with_state(dei)
}

/// A server running on its own thread; dropping it shuts the server down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves `app` on a background thread.
pub fn spawn(app: Router, addr: &str) -> sloop_core::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name(format!("http-{local}")).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    })?;
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
