//! Pose solving over HTTP and WebSocket.
//!
//! Endpoints: `POST /v1/solve`, `GET /v1/skeletons/{id}`, `GET /v1/health`
//! and the `/v1/stream` WebSocket. Models are immutable after loading and
//! shared by every connection.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Notify, Semaphore};

use protores::checkpoint::load_checkpoint;
use protores::effector::resolve_records;
use protores::geometry::{matrix_to_quaternion, matrix_to_rotation6d};
use protores::model::Model;
use protores::{EffectorRecord, Error as CoreError, Pose, SkeletonSpec};

/// A checkpoint bound to the skeleton it was trained on.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub id: String,
    pub model: Model,
    pub skeleton: SkeletonSpec,
}

impl LoadedModel {
    pub fn new(id: impl Into<String>, model: Model, skeleton: SkeletonSpec) -> Result<Self, ServiceError> {
        if model.config.joint_count != skeleton.joint_count() {
            return Err(ServiceError::Startup(format!(
                "model has {} joints but skeleton {:?} has {}",
                model.config.joint_count,
                skeleton.name,
                skeleton.joint_count()
            )));
        }
        Ok(Self {
            id: id.into(),
            model,
            skeleton,
        })
    }

    /// Loads a checkpoint. Without an explicit skeleton file the skeleton is
    /// looked up by the name recorded in the checkpoint metadata.
    pub fn load(id: impl Into<String>, checkpoint: &Path, skeleton: Option<&Path>) -> Result<Self, ServiceError> {
        let fail = |e: CoreError| ServiceError::Startup(format!("{}: {e}", checkpoint.display()));
        let (model, manifest) = load_checkpoint(checkpoint).map_err(fail)?;
        let skeleton = match skeleton {
            Some(p) => SkeletonSpec::load(p).map_err(|e| ServiceError::Startup(format!("{}: {e}", p.display())))?,
            None => {
                let name = manifest.metadata.get("skeleton").map(String::as_str).unwrap_or("humanoid64");
                SkeletonSpec::builtin(name).ok_or_else(|| {
                    ServiceError::Startup(format!(
                        "{}: skeleton {name:?} is not built in; pass a skeleton file",
                        checkpoint.display()
                    ))
                })?
            }
        };
        Self::new(id, model, skeleton)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationFormat {
    /// `[x, y, z, w]`
    #[default]
    Quaternion,
    /// The first two matrix columns.
    Sixd,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    #[serde(default)]
    pub include_global_positions: bool,
    #[serde(default)]
    pub rotation_format: RotationFormat,
    /// Leave off for reproducible response bytes.
    #[serde(default = "yes")]
    pub include_latency: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            include_global_positions: false,
            rotation_format: RotationFormat::Quaternion,
            include_latency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRequest {
    /// Model id; may be omitted when exactly one model is loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub effectors: Vec<EffectorRecord>,
    #[serde(default)]
    pub options: SolveOptions,
    /// Echoed back; lets stream clients match responses to requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u64>,
}

/// Solved pose. Numbers are rounded to f32 so responses are compact and
/// stable across platforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u64>,
    pub model: String,
    pub root_position: [f32; 3],
    pub rotation_format: RotationFormat,
    pub rotations: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_positions: Option<Vec<[f32; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl SolveResponse {
    /// The pose these numbers describe.
    pub fn pose(&self) -> Option<Pose> {
        let root = self.root_position.map(f64::from);
        let mats: Vec<_> = self
            .rotations
            .iter()
            .map(|r| match (self.rotation_format, r.as_slice()) {
                (RotationFormat::Quaternion, &[x, y, z, w]) => {
                    protores::geometry::quaternion_to_matrix(&protores::geometry::Quat::new(w as f64, x as f64, y as f64, z as f64)).ok()
                }
                (RotationFormat::Sixd, s) if s.len() == 6 => {
                    let v: [f64; 6] = std::array::from_fn(|k| s[k] as f64);
                    protores::geometry::rotation6d_to_matrix(&v).ok()
                }
                _ => None,
            })
            .collect::<Option<_>>()?;
        Some(Pose::from_matrices(root.into(), &mats))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown model {0:?}")]
    NotFound(String),
    #[error("invalid request at {path}: {message}")]
    BadRequest { path: String, message: String },
    #[error("solve failed: {0}")]
    Internal(String),
    #[error("{0}")]
    Startup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u64>,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn body(&self, request_id: Option<u64>) -> ErrorBody {
        ErrorBody {
            request_id,
            error: self.to_string(),
            path: match self {
                ServiceError::BadRequest { path, .. } => Some(path.clone()),
                _ => None,
            },
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body(None))).into_response()
    }
}

fn bad_request(e: CoreError) -> ServiceError {
    match e {
        CoreError::InvalidEffector { path, message } => ServiceError::BadRequest { path, message },
        CoreError::EmptyInput => ServiceError::BadRequest {
            path: "effectors".into(),
            message: "at least one effector is required".into(),
        },
        other => ServiceError::BadRequest {
            path: "effectors".into(),
            message: other.to_string(),
        },
    }
}

/// Loaded models by id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<LoadedModel>>,
}

impl Registry {
    pub fn new(models: impl IntoIterator<Item = LoadedModel>) -> Self {
        Self {
            models: models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    fn pick(&self, id: Option<&str>) -> Result<&Arc<LoadedModel>, ServiceError> {
        match id {
            Some(id) => self.models.get(id).ok_or_else(|| ServiceError::NotFound(id.into())),
            None if self.models.len() == 1 => Ok(self.models.values().next().expect("one model")),
            None => Err(ServiceError::BadRequest {
                path: "model".into(),
                message: format!("required when more than one model is loaded ({})", self.ids().join(", ")),
            }),
        }
    }

    /// Deterministic eval-mode solve.
    pub fn solve(&self, request: &SolveRequest) -> Result<SolveResponse, ServiceError> {
        let started = Instant::now();
        let loaded = self.pick(request.model.as_deref())?;
        let skel = &loaded.skeleton;
        let set = resolve_records(&request.effectors, skel).map_err(bad_request)?;
        let out = loaded.model.forward(skel, &set).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let f = |v: f64| v as f32;
        let root = out.global.positions[0];
        let rotations = out
            .local_rotations
            .iter()
            .map(|r| match request.options.rotation_format {
                RotationFormat::Quaternion => {
                    let q = matrix_to_quaternion(r);
                    vec![f(q.i), f(q.j), f(q.k), f(q.w)]
                }
                RotationFormat::Sixd => matrix_to_rotation6d(r).iter().map(|v| f(*v)).collect(),
            })
            .collect();
        let mut response = SolveResponse {
            request_id: request.request_id,
            model: loaded.id.clone(),
            root_position: [f(root.x), f(root.y), f(root.z)],
            rotation_format: request.options.rotation_format,
            rotations,
            global_positions: None,
            latency_ms: None,
        };
        if request.options.include_global_positions {
            // FK of the rounded pose, so the reported positions agree with
            // the reported rotations.
            let pose = response.pose().ok_or_else(|| ServiceError::Internal("non-rotation output".into()))?;
            let g = pose.global_transforms(skel).map_err(|e| ServiceError::Internal(e.to_string()))?;
            response.global_positions = Some(g.positions.iter().map(|p| [f(p.x), f(p.y), f(p.z)]).collect());
        }
        if request.options.include_latency {
            response.latency_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        Ok(response)
    }
}

#[derive(Clone)]
struct AppState {
    registry: Arc<Registry>,
    /// Bounds concurrent solves across all connections.
    workers: Arc<Semaphore>,
}

impl AppState {
    async fn solve(&self, request: SolveRequest) -> Result<SolveResponse, ServiceError> {
        let _permit = self.workers.acquire().await.map_err(|e| ServiceError::Internal(e.to_string()))?;
        let registry = self.registry.clone();
        tokio::task::spawn_blocking(move || registry.solve(&request))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub models: Vec<String>,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        models: state.registry.ids(),
    })
}

/// Skeleton by model id or by skeleton name.
async fn skeleton(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let found = state
        .registry
        .models
        .get(&id)
        .map(|m| &m.skeleton)
        .or_else(|| state.registry.models.values().map(|m| &m.skeleton).find(|s| s.name == id));
    match found {
        Some(s) => Json(s.clone()).into_response(),
        None => ServiceError::NotFound(id).into_response(),
    }
}

async fn solve(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    let request: SolveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return ServiceError::BadRequest {
                path: "body".into(),
                message: e.to_string(),
            }
            .into_response()
        }
    };
    match state.solve(request).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn stream(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| run_stream(state, socket))
}

/// The most recent unanswered message on a stream connection.
#[derive(Default)]
struct Pending {
    job: Option<String>,
    closed: bool,
}

/// One solve in flight per connection. Messages that arrive while a solve
/// runs replace each other, so the next solve always uses the newest one;
/// responses leave in request order.
async fn run_stream(state: AppState, socket: WebSocket) {
    let (mut sink, mut source) = socket.split();
    let slot = Arc::new(Mutex::new(Pending::default()));
    let wake = Arc::new(Notify::new());

    let reader = {
        let slot = slot.clone();
        let wake = wake.clone();
        tokio::spawn(async move {
            while let Some(Ok(msg)) = source.next().await {
                let text = match msg {
                    Message::Text(t) => t.to_string(),
                    Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                    Message::Close(_) => break,
                    _ => continue,
                };
                slot.lock().await.job = Some(text);
                wake.notify_one();
            }
            slot.lock().await.closed = true;
            wake.notify_one();
        })
    };

    loop {
        wake.notified().await;
        loop {
            let job = {
                let mut p = slot.lock().await;
                match p.job.take() {
                    Some(j) => j,
                    None if p.closed => {
                        let _ = reader.await;
                        return;
                    }
                    None => break,
                }
            };
            let reply = match serde_json::from_str::<SolveRequest>(&job) {
                Ok(request) => {
                    let id = request.request_id;
                    match state.solve(request).await {
                        Ok(r) => serde_json::to_string(&r),
                        Err(e) => serde_json::to_string(&e.body(id)),
                    }
                }
                Err(e) => serde_json::to_string(
                    &ServiceError::BadRequest {
                        path: "body".into(),
                        message: e.to_string(),
                    }
                    .body(None),
                ),
            };
            let text = reply.expect("responses serialize");
            if sink.send(Message::Text(text.into())).await.is_err() {
                reader.abort();
                return;
            }
        }
    }
}

pub fn router(registry: Registry, workers: usize) -> Router {
    let state = AppState {
        registry: Arc::new(registry),
        workers: Arc::new(Semaphore::new(workers.max(1))),
    };
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/solve", post(solve))
        .route("/v1/skeletons/{id}", get(skeleton))
        .route("/v1/stream", get(stream))
        .with_state(state)
}

/// Where to serve and which checkpoints to load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
    /// Concurrent solves; defaults to the number of CPUs.
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub skeleton: Option<PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            models: Vec::new(),
            workers: None,
        }
    }
}

impl ServeConfig {
    /// Applies `PROTORES_BIND` and `PROTORES_CHECKPOINT` from `env`. The
    /// checkpoint variable adds (or replaces) the model with id `default`.
    pub fn with_env<I: IntoIterator<Item = (String, String)>>(mut self, env: I) -> Self {
        for (k, v) in env {
            match k.as_str() {
                "PROTORES_BIND" => self.bind = v,
                "PROTORES_CHECKPOINT" => {
                    self.models.retain(|m| m.id != "default");
                    self.models.push(ModelEntry {
                        id: "default".into(),
                        checkpoint: v.into(),
                        skeleton: None,
                    });
                }
                _ => {}
            }
        }
        self
    }

    pub fn load_registry(&self) -> Result<Registry, ServiceError> {
        if self.models.is_empty() {
            return Err(ServiceError::Startup(
                "no checkpoint configured (set PROTORES_CHECKPOINT or pass --checkpoint)".into(),
            ));
        }
        let models = self
            .models
            .iter()
            .map(|m| LoadedModel::load(m.id.clone(), &m.checkpoint, m.skeleton.as_deref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Registry::new(models))
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Binds and serves until the task is dropped. Returns the bound address
/// through `on_bound` (useful with port 0).
pub async fn serve(config: &ServeConfig, on_bound: impl FnOnce(SocketAddr)) -> Result<(), ServiceError> {
    let registry = config.load_registry()?;
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(|e| ServiceError::Startup(format!("cannot bind {}: {e}", config.bind)))?;
    let addr = listener.local_addr().map_err(|e| ServiceError::Startup(e.to_string()))?;
    tracing::info!(%addr, models = ?registry.ids(), "serving");
    on_bound(addr);
    let app = router(registry, config.workers.unwrap_or_else(default_workers));
    axum::serve(listener, app)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
