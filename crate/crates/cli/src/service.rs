//! HTTP API over a loaded artifact directory. All bodies are JSON except
//! `POST /api/encode` (PNG in) and `POST /api/render` (PNG out). Errors are
//! `{"error", "field", "kind"}` with a 4xx/5xx status.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gsavatar_core::io::{hash_bytes, hash_scalars, ModelFile};
use gsavatar_core::{Camera, GaussianModel, Image};
use gsavatar_pipeline::latent::{interpolate, traverse};
use lru::LruCache;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::error::{AppError, AppResult, ErrorKind};
use crate::ops::{self, check_background, check_code, decode_model, Artifacts, CameraSpec, OrbitSpec};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Largest accepted request body.
    pub max_body_bytes: usize,
    pub max_pixels: u64,
    pub max_refine_iters: usize,
    pub refine_workers: usize,
    pub model_cache: usize,
    pub image_cache: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_body_bytes: 8 << 20,
            max_pixels: 1 << 20,
            max_refine_iters: 2000,
            refine_workers: 1,
            model_cache: 32,
            image_cache: 16,
        }
    }
}

pub struct AppState {
    pub artifacts: Artifacts,
    pub config: ServiceConfig,
    models: Mutex<LruCache<String, Arc<GaussianModel<f64>>>>,
    images: Mutex<LruCache<String, Arc<Image<f64>>>>,
    refine_slots: Semaphore,
}

impl AppState {
    pub fn new(artifacts: Artifacts, config: ServiceConfig) -> Self {
        let cap = |n: usize| NonZeroUsize::new(n.max(1)).unwrap();
        AppState {
            models: Mutex::new(LruCache::new(cap(config.model_cache))),
            images: Mutex::new(LruCache::new(cap(config.image_cache))),
            refine_slots: Semaphore::new(config.refine_workers.max(1)),
            artifacts,
            config,
        }
    }

    fn w_dim(&self) -> usize {
        self.artifacts.bundle.decoder.arch.w_dim
    }

    /// Decodes `w` through the cache; the id is the hash of the code.
    fn model(&self, w: &[f64]) -> AppResult<(String, Arc<GaussianModel<f64>>)> {
        let id = hash_scalars(w);
        if let Some(m) = self.models.lock().unwrap().get(&id) {
            return Ok((id, m.clone()));
        }
        let m = Arc::new(decode_model(&self.artifacts.bundle, w)?);
        self.models.lock().unwrap().put(id.clone(), m.clone());
        Ok((id, m))
    }

    fn cached_model(&self, id: &str) -> AppResult<Arc<GaussianModel<f64>>> {
        self.models
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::not_found("model_id", format!("unknown or evicted model {id}")))
    }

    fn check_camera(&self, cam: &Camera<f64>) -> AppResult<()> {
        if cam.width as u64 * cam.height as u64 > self.config.max_pixels {
            return Err(AppError::new(
                ErrorKind::TooLarge,
                format!("{}x{} exceeds {} pixels", cam.width, cam.height, self.config.max_pixels),
            )
            .with_field("camera"));
        }
        Ok(())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.kind.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, [(header::CONTENT_TYPE, "application/json")], self.to_json()).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/subjects", get(subjects))
        .route("/api/subjects/{id}", get(subject))
        .route("/api/directions", get(directions))
        .route("/api/encode", post(encode))
        .route("/api/model", post(model))
        .route("/api/model/{id}", get(model_json))
        .route("/api/render", post(render))
        .route("/api/interpolate", post(interpolate_h))
        .route("/api/traverse", post(traverse_h))
        .route("/api/refine", post(refine_h))
        .fallback(|| async { AppError::new(ErrorKind::NotFound, "no such endpoint") })
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

pub async fn serve(artifacts: Artifacts, config: ServiceConfig, addr: &str) -> AppResult<()> {
    let app = router(Arc::new(AppState::new(artifacts, config)));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| AppError::invalid("port", format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::new(ErrorKind::Internal, e.to_string()))
}

async fn body_bytes(state: &AppState, headers: &HeaderMap, body: Body) -> AppResult<Vec<u8>> {
    let limit = state.config.max_body_bytes;
    let too_large = || AppError::new(ErrorKind::TooLarge, format!("request body exceeds {limit} bytes"));
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > limit as u64) {
        return Err(too_large());
    }
    axum::body::to_bytes(body, limit).await.map(|b| b.to_vec()).map_err(|_| too_large())
}

async fn json_body<R: DeserializeOwned>(state: &AppState, headers: &HeaderMap, body: Body) -> AppResult<R> {
    let bytes = body_bytes(state, headers, body).await?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Runs CPU-bound work off the async executor.
async fn blocking<R: Send + 'static>(f: impl FnOnce() -> AppResult<R> + Send + 'static) -> AppResult<R> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::new(ErrorKind::Internal, format!("worker failed: {e}")))?
}

fn camera_from(value: Option<Value>, default: OrbitSpec) -> AppResult<Camera<f64>> {
    match value {
        None | Some(Value::Null) => default.camera(),
        Some(v) => {
            let spec: CameraSpec = serde_json::from_value(v).map_err(|_| {
                AppError::invalid(
                    "camera",
                    "expected {azimuth_deg, elevation_deg, distance?, width?, height?, focal?} or a full camera",
                )
            })?;
            spec.camera()
        }
    }
}

type Shared = State<Arc<AppState>>;

async fn health(State(s): Shared) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "w_dim": s.w_dim(),
        "k": s.artifacts.bundle.k(),
        "has_encoder": s.artifacts.encoder.is_some(),
        "artifact_hashes": s.artifacts.hashes,
    }))
}

#[derive(Serialize)]
struct SubjectInfo {
    id: String,
    code_available: bool,
}

async fn subjects(State(s): Shared) -> Json<Vec<SubjectInfo>> {
    Json(
        s.artifacts
            .subjects()
            .into_iter()
            .map(|(id, code_available)| SubjectInfo { id, code_available })
            .collect(),
    )
}

async fn subject(State(s): Shared, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let code = s.artifacts.bundle.codes.get(&id);
    let entry = s.artifacts.dataset.as_ref().and_then(|d| d.subject(&id).ok());
    if code.is_none() && entry.is_none() {
        return Err(AppError::not_found("id", format!("unknown subject {id}")));
    }
    Ok(Json(json!({
        "id": id,
        "w": code,
        "labels": entry.map(|e| &e.attribute_labels),
        "views": entry.map(|e| e.views.len()),
    })))
}

async fn directions(State(s): Shared) -> Json<Value> {
    Json(json!(s.artifacts.directions.values().collect::<Vec<_>>()))
}

async fn encode(State(s): Shared, headers: HeaderMap, body: Body) -> AppResult<Json<Value>> {
    let bytes = body_bytes(&s, &headers, body).await?;
    if s.artifacts.encoder.is_none() {
        return Err(AppError::not_found("encoder", "no encoder in the artifact directory"));
    }
    let (w, h) = Image::<f64>::png_dimensions(&bytes).map_err(|e| AppError::invalid("image", e.to_string()))?;
    if w as u64 * h as u64 > s.config.max_pixels {
        return Err(AppError::new(ErrorKind::TooLarge, format!("{w}x{h} exceeds {} pixels", s.config.max_pixels)).with_field("image"));
    }
    blocking(move || {
        let image_id = hash_bytes(&bytes);
        let image = Image::<f64>::decode_png(&bytes).map_err(|e| AppError::invalid("image", e.to_string()))?;
        let w = s.artifacts.encoder.as_ref().unwrap().encode(&image)?;
        s.images.lock().unwrap().put(image_id.clone(), Arc::new(image));
        Ok(Json(json!({ "w": w, "image_id": image_id })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeRequest {
    w: Vec<f64>,
}

async fn model(State(s): Shared, headers: HeaderMap, body: Body) -> AppResult<Json<Value>> {
    let req: CodeRequest = json_body(&s, &headers, body).await?;
    blocking(move || {
        let (id, _) = s.model(&req.w)?;
        Ok(Json(json!({ "model_id": id })))
    })
    .await
}

async fn model_json(State(s): Shared, Path(id): Path<String>) -> AppResult<Json<ModelFile>> {
    let m = s.cached_model(&id)?;
    Ok(Json(ModelFile::from(&*m)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    #[serde(default)]
    w: Option<Vec<f64>>,
    #[serde(default)]
    model_id: Option<String>,
    #[serde(default)]
    camera: Option<Value>,
    #[serde(default)]
    background: Option<[f64; 3]>,
}

async fn render(State(s): Shared, headers: HeaderMap, body: Body) -> AppResult<Response> {
    let req: RenderRequest = json_body(&s, &headers, body).await?;
    let cam = camera_from(req.camera, OrbitSpec::frontal())?;
    s.check_camera(&cam)?;
    let bg = check_background(req.background.unwrap_or([1.0; 3]), "background")?;
    let (png, id) = blocking(move || {
        let (id, model) = match (req.w, req.model_id) {
            (Some(w), None) => s.model(&w)?,
            (None, Some(id)) => (id.clone(), s.cached_model(&id)?),
            _ => return Err(AppError::invalid("w", "give exactly one of w and model_id")),
        };
        Ok((ops::render_png(&model, &cam, bg)?, id))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png".to_string()), (header::HeaderName::from_static("x-model-id"), id)], png).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolateRequest {
    w1: Vec<f64>,
    w2: Vec<f64>,
    alpha: f64,
}

async fn interpolate_h(State(s): Shared, headers: HeaderMap, body: Body) -> AppResult<Json<Value>> {
    let req: InterpolateRequest = json_body(&s, &headers, body).await?;
    check_code(&req.w1, s.w_dim(), "w1")?;
    check_code(&req.w2, s.w_dim(), "w2")?;
    let w = interpolate(&req.w1, &req.w2, req.alpha).map_err(|e| AppError::from(e).with_field("alpha"))?;
    Ok(Json(json!({ "w": w })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraverseRequest {
    w: Vec<f64>,
    direction: String,
    lambda: f64,
}

async fn traverse_h(State(s): Shared, headers: HeaderMap, body: Body) -> AppResult<Json<Value>> {
    let req: TraverseRequest = json_body(&s, &headers, body).await?;
    check_code(&req.w, s.w_dim(), "w")?;
    let dir = s
        .artifacts
        .directions
        .get(&req.direction)
        .ok_or_else(|| AppError::not_found("direction", format!("unknown direction {}", req.direction)))?;
    let w = traverse(&req.w, dir, req.lambda).map_err(|e| AppError::from(e).with_field("lambda"))?;
    Ok(Json(json!({ "w": w, "score_before": dir.score(&req.w), "score_after": dir.score(&w) })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RefineRequest {
    w: Vec<f64>,
    image_id: String,
    iters: usize,
    #[serde(default)]
    camera: Option<Value>,
}

/// Image to refine against, and its camera when it has one.
type Target = (Arc<Image<f64>>, Option<Camera<f64>>);

/// Refinement target: a cached upload, or a dataset view `subject/index`
/// with its own camera.
fn refine_target(s: &AppState, image_id: &str) -> AppResult<Target> {
    if let Some(img) = s.images.lock().unwrap().get(image_id) {
        return Ok((img.clone(), None));
    }
    match s.artifacts.dataset_view(image_id) {
        Some(r) => r.map(|(img, cam)| (Arc::new(img), Some(cam))),
        None => Err(AppError::not_found(
            "image_id",
            format!("unknown image {image_id}; upload it through /api/encode first"),
        )),
    }
}

async fn refine_h(State(s): Shared, headers: HeaderMap, body: Body) -> AppResult<Json<Value>> {
    let req: RefineRequest = json_body(&s, &headers, body).await?;
    check_code(&req.w, s.w_dim(), "w")?;
    if req.iters > s.config.max_refine_iters {
        return Err(AppError::invalid("iters", format!("at most {} iterations", s.config.max_refine_iters)));
    }
    let _permit = s
        .refine_slots
        .acquire()
        .await
        .map_err(|e| AppError::new(ErrorKind::Internal, e.to_string()))?;
    let st = s.clone();
    blocking(move || {
        let (image, own_cam) = refine_target(&st, &req.image_id)?;
        let cam = match (req.camera, own_cam) {
            (Some(v), _) => camera_from(Some(v), OrbitSpec::frontal())?,
            (None, Some(c)) => c,
            (None, None) => OrbitSpec {
                width: Some(image.width()),
                height: Some(image.height()),
                ..OrbitSpec::frontal()
            }
            .camera()?,
        };
        st.check_camera(&cam)?;
        let (w, trace) = if req.iters == 0 {
            (req.w, Vec::new())
        } else {
            let out = ops::refine_code(&image, &cam, &req.w, &st.artifacts.bundle, req.iters)?;
            (out.w, out.trace)
        };
        let (id, _) = st.model(&w)?;
        Ok(Json(json!({ "w": w, "loss_trace": trace, "model_id": id })))
    })
    .await
}
