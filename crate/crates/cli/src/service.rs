//! HTTP render service over immutable scene snapshots.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tunegs::render::render_color;
use tunegs::scene::{find_camera, load_cameras, load_scene_json, normalize_quat, quat_to_matrix};
use tunegs::style::{compose_multi, FieldFile, Mask, StyleLayer, StyledScene};
use tunegs::{Camera, Error, GaussianScene, RenderConfig};

/// Files a snapshot is built from; reloading reads them again.
#[derive(Clone, Debug)]
pub struct Sources {
    pub scene: PathBuf,
    pub cameras: PathBuf,
    pub fields: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
}

/// Everything a request renders against. Never mutated after construction.
#[derive(Debug)]
pub struct ServeState {
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    pub styles: BTreeMap<String, FieldFile>,
    pub masks: BTreeMap<String, Mask>,
    pub render: RenderConfig,
}

impl ServeState {
    pub fn new(
        scene: GaussianScene,
        cameras: Vec<Camera>,
        fields: Vec<FieldFile>,
        masks: Vec<Mask>,
        render: RenderConfig,
    ) -> tunegs::Result<Self> {
        let mut styles = BTreeMap::new();
        for f in fields {
            f.check_scene(&scene)?;
            let id = f.field.style_id.clone();
            if styles.insert(id.clone(), f).is_some() {
                return Err(Error::Validation(format!("style {id} loaded twice")));
            }
        }
        let mut by_id = BTreeMap::new();
        for m in masks {
            m.validate(scene.len())?;
            let id = m.id.clone();
            if by_id.insert(id.clone(), m).is_some() {
                return Err(Error::Validation(format!("mask {id} loaded twice")));
            }
        }
        Ok(Self {
            scene,
            cameras,
            styles,
            masks: by_id,
            render,
        })
    }

    pub fn load(sources: &Sources, render: RenderConfig) -> tunegs::Result<Self> {
        let scene = load_scene_json(&sources.scene)?;
        let cameras = load_cameras(&sources.cameras)?;
        let fields = sources.fields.iter().map(FieldFile::load).collect::<tunegs::Result<Vec<_>>>()?;
        let masks = sources.masks.iter().map(Mask::load).collect::<tunegs::Result<Vec<_>>>()?;
        Self::new(scene, cameras, fields, masks, render)
    }
}

/// One style in a render request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRequest {
    pub style_id: String,
    pub beta: f64,
    #[serde(default)]
    pub mask_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// World-to-camera rotation as a `wxyz` quaternion.
    pub w2c_rot: [f64; 4],
    pub w2c_trans: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRequest {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub styles: Vec<StyleRequest>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_io() {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// A snapshot with the counter that tells snapshots apart in the cache.
struct Snapshot {
    generation: u64,
    state: Arc<ServeState>,
}

pub struct AppState {
    snapshot: RwLock<Snapshot>,
    cache: Option<Mutex<LruCache<String, Bytes>>>,
    sources: Option<Sources>,
}

impl AppState {
    pub fn new(state: ServeState, cache_size: usize, sources: Option<Sources>) -> Arc<Self> {
        Arc::new(Self {
            snapshot: RwLock::new(Snapshot {
                generation: 0,
                state: Arc::new(state),
            }),
            cache: NonZeroUsize::new(cache_size).map(|n| Mutex::new(LruCache::new(n))),
            sources,
        })
    }

    fn current(&self) -> (u64, Arc<ServeState>) {
        let s = self.snapshot.read().expect("snapshot lock poisoned");
        (s.generation, Arc::clone(&s.state))
    }

    /// Swaps in a freshly loaded snapshot; readers holding the old one keep it.
    pub fn replace(&self, state: ServeState) -> u64 {
        let mut s = self.snapshot.write().expect("snapshot lock poisoned");
        s.generation += 1;
        s.state = Arc::new(state);
        s.generation
    }

    pub fn cached_entries(&self) -> usize {
        self.cache
            .as_ref()
            .map_or(0, |c| c.lock().expect("cache lock poisoned").len())
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/scene/meta", get(scene_meta))
        .route("/styles", get(styles))
        .route("/masks", get(masks))
        .route("/render", get(render_view).post(render_pose))
        .route("/admin/reload", post(reload))
        .with_state(app)
}

pub async fn serve(app: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn scene_meta(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let (_, s) = app.current();
    let (lo, hi) = s.scene.bounds();
    Json(json!({
        "N": s.scene.len(),
        "views": s.cameras.iter().map(|c| c.view_id.clone()).collect::<Vec<_>>(),
        "bounds": { "min": lo, "max": hi },
    }))
}

async fn styles(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let (_, s) = app.current();
    let list: Vec<_> = s
        .styles
        .values()
        .map(|f| {
            json!({
                "style_id": f.field.style_id,
                "Z": f.tuner.levels(),
                "a": f.tuner.a,
                "b": f.tuner.b,
            })
        })
        .collect();
    Json(json!(list))
}

async fn masks(State(app): State<Arc<AppState>>) -> Json<Vec<String>> {
    let (_, s) = app.current();
    Json(s.masks.keys().cloned().collect())
}

#[derive(Debug, Deserialize)]
struct ViewQuery {
    view: String,
    style: Option<String>,
    beta: Option<f64>,
    width: Option<u32>,
    height: Option<u32>,
}

async fn render_view(
    State(app): State<Arc<AppState>>,
    query: Result<Query<ViewQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::invalid(e.body_text()))?;
    let (generation, state) = app.current();
    let cam = find_camera(&state.cameras, &q.view)
        .ok_or_else(|| ApiError::not_found(format!("unknown view {}", q.view)))?;
    let cam = match (q.width, q.height) {
        (None, None) => cam.clone(),
        (w, h) => {
            let w = w.unwrap_or(cam.width);
            let h = h.unwrap_or(cam.height);
            if w == 0 || h == 0 || w > 4096 || h > 4096 {
                return Err(ApiError::invalid(format!("size {w}x{h} out of range")));
            }
            cam.resized(w, h)
        }
    };
    let styles = match q.style {
        None => {
            if q.beta.is_some() {
                return Err(ApiError::invalid("beta given without style"));
            }
            Vec::new()
        }
        Some(style_id) => vec![StyleRequest {
            style_id,
            beta: q.beta.ok_or_else(|| ApiError::invalid("style given without beta"))?,
            mask_id: None,
        }],
    };
    respond(app, generation, state, cam, styles).await
}

async fn render_pose(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: PoseRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::invalid(format!("bad request body: {e}")))?;
    let i = &req.intrinsics;
    if i.width == 0 || i.height == 0 || i.width > 4096 || i.height > 4096 {
        return Err(ApiError::invalid(format!("size {}x{} out of range", i.width, i.height)));
    }
    let norm: f64 = req.pose.w2c_rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-9 && norm.is_finite()) {
        return Err(ApiError::invalid("pose rotation is not a valid quaternion"));
    }
    let cam = Camera {
        view_id: "pose".into(),
        fx: i.fx,
        fy: i.fy,
        cx: i.cx,
        cy: i.cy,
        width: i.width,
        height: i.height,
        rotation: quat_to_matrix(normalize_quat(req.pose.w2c_rot)),
        translation: Vector3::from(req.pose.w2c_trans),
    };
    cam.validate()?;
    let (generation, state) = app.current();
    respond(app, generation, state, cam, req.styles).await
}

/// Checks a request against the snapshot before any rendering happens.
fn check_styles(state: &ServeState, styles: &[StyleRequest]) -> Result<(), ApiError> {
    let mut seen = std::collections::HashSet::new();
    for s in styles {
        let f = state
            .styles
            .get(&s.style_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown style {}", s.style_id)))?;
        if !seen.insert(s.style_id.as_str()) {
            return Err(ApiError::invalid(format!("style {} requested twice", s.style_id)));
        }
        let (a, b) = (f.tuner.a as f64, f.tuner.b as f64);
        if !(s.beta >= a && s.beta <= b) {
            return Err(ApiError::invalid(format!(
                "beta {} for style {} outside [{a}, {b}]",
                s.beta, s.style_id
            )));
        }
        if let Some(m) = &s.mask_id {
            if !state.masks.contains_key(m) {
                return Err(ApiError::not_found(format!("unknown mask {m}")));
            }
        }
    }
    Ok(())
}

fn cache_key(generation: u64, cam: &Camera, styles: &[StyleRequest]) -> String {
    let r = cam.rotation.as_slice().iter().map(|v| v.to_bits());
    let t = cam.translation.iter().map(|v| v.to_bits());
    let intr = [cam.fx, cam.fy, cam.cx, cam.cy].map(f64::to_bits);
    let mut key = format!("{generation}|{}x{}|{intr:?}|", cam.width, cam.height);
    key.push_str(&format!("{:?}|", r.chain(t).collect::<Vec<_>>()));
    for s in styles {
        key.push_str(&format!("{}:{}:{:?};", s.style_id, s.beta.to_bits(), s.mask_id));
    }
    key
}

fn render_png(state: &ServeState, cam: &Camera, styles: &[StyleRequest]) -> Result<Bytes, ApiError> {
    let layers: Vec<StyleLayer> = styles
        .iter()
        .map(|s| {
            let f = &state.styles[&s.style_id];
            StyleLayer {
                field: &f.field,
                tuner: &f.tuner,
                beta: s.beta,
                mask: s.mask_id.as_ref().map(|m| state.masks[m].indices.as_slice()),
            }
        })
        .collect();
    let styled = StyledScene {
        base: &state.scene,
        active: layers,
    };
    let scene = compose_multi(&styled)?;
    let png = render_color(&scene, cam, &state.render).encode_png()?;
    Ok(Bytes::from(png))
}

async fn respond(
    app: Arc<AppState>,
    generation: u64,
    state: Arc<ServeState>,
    cam: Camera,
    styles: Vec<StyleRequest>,
) -> Result<Response, ApiError> {
    check_styles(&state, &styles)?;
    let key = cache_key(generation, &cam, &styles);
    if let Some(cache) = &app.cache {
        if let Some(hit) = cache.lock().expect("cache lock poisoned").get(&key) {
            return Ok(png_response(hit.clone()));
        }
    }
    let body = tokio::task::spawn_blocking(move || render_png(&state, &cam, &styles))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    if let Some(cache) = &app.cache {
        cache.lock().expect("cache lock poisoned").put(key, body.clone());
    }
    Ok(png_response(body))
}

fn png_response(body: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], body).into_response()
}

async fn reload(State(app): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let sources = app
        .sources
        .clone()
        .ok_or_else(|| ApiError::invalid("service was not started from files"))?;
    let render = app.current().1.render.clone();
    let state = tokio::task::spawn_blocking(move || ServeState::load(&sources, render))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let generation = app.replace(state);
    Ok(Json(json!({ "generation": generation })))
}
