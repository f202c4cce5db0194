//! Backend for the disc-tracing portal: annotators log in, see the images
//! assigned to them, store strokes incrementally, submit, and the rendered
//! masks are exported for training.

pub mod auth;
pub mod error;
pub mod render;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use odseg_core::data::{mask_png_bytes, merge_annotations, read_mask};

pub use auth::AuthPolicy;
pub use error::ServiceError;
use render::{render_mask, Stroke, StrokeMode};
use store::Store;
pub use store::{Status, TracingRecord};

/// Widest brush accepted, in pixels.
pub const MAX_BRUSH_WIDTH: f64 = 256.0;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub users_file: PathBuf,
    /// Directory with the UI bundle served under `/`.
    pub static_dir: Option<PathBuf>,
    pub auth: AuthPolicy,
}

pub struct AppState {
    store: Store,
    users: HashMap<String, auth::Account>,
    sessions: Mutex<auth::Sessions>,
    streams: Mutex<HashMap<(String, String), Arc<tokio::sync::Mutex<()>>>>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(config: &ServiceConfig) -> Result<Self, ServiceError> {
        Ok(AppState {
            store: Store::open(&config.data_dir)?,
            users: auth::read_users(&config.users_file)?,
            sessions: Mutex::new(auth::Sessions::new(config.auth)),
            streams: Mutex::new(HashMap::new()),
            static_dir: config.static_dir.clone(),
        })
    }

    fn user(&self, headers: &HeaderMap, query_token: Option<&str>) -> Result<String, ServiceError> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .or(query_token)
            .ok_or(ServiceError::Unauthorized)?;
        self.sessions
            .lock()
            .expect("session lock")
            .resolve(token.trim())
            .ok_or(ServiceError::Unauthorized)
    }

    fn stream_lock(&self, id: &str, user: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.streams
            .lock()
            .expect("stream map lock")
            .entry((id.to_string(), user.to_string()))
            .or_default()
            .clone()
    }

    fn assigned(&self, user: &str, id: &str) -> Result<(), ServiceError> {
        self.store.image(id)?;
        if !self.store.is_assigned(user, id) {
            return Err(ServiceError::Forbidden);
        }
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/login", post(login))
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/image", get(image_png))
        .route("/api/images/{id}/strokes", get(get_strokes).post(post_strokes))
        .route("/api/images/{id}/submit", post(submit))
        .route("/api/export/{id}", get(export_one))
        .route("/api/export/{id}/merged", get(export_merged))
        .fallback(static_file)
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C. Binding errors (e.g. a port in
/// use) are returned before anything is served.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::new(&config)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Config(format!("cannot bind {addr}: {e}")))?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
    password: String,
}

#[derive(Serialize)]
struct LoginResponse {
    token: String,
}

async fn login(
    State(state): State<Arc<AppState>>,
    Json(req): Json<LoginRequest>,
) -> Result<Json<LoginResponse>, ServiceError> {
    let result = state
        .sessions
        .lock()
        .expect("session lock")
        .login(&state.users, &req.username, &req.password);
    match result {
        Ok(token) => Ok(Json(LoginResponse { token })),
        Err(auth::LoginError::Invalid) => Err(ServiceError::Unauthorized),
        Err(auth::LoginError::Throttled) => Err(ServiceError::Throttled),
    }
}

#[derive(Serialize)]
struct ImageItem {
    id: String,
    thumbnail_url: String,
    status: &'static str,
}

async fn list_images(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Json<Vec<ImageItem>>, ServiceError> {
    let user = state.user(&headers, None)?;
    let mut out = Vec::new();
    for id in state.store.image_ids() {
        if !state.store.is_assigned(&user, id) || state.store.is_submitted(id, &user)? {
            continue;
        }
        let status = if state.store.has_strokes(id, &user)? {
            "in-progress"
        } else {
            "pending"
        };
        out.push(ImageItem {
            id: id.clone(),
            thumbnail_url: format!("/api/images/{id}/image"),
            status,
        });
    }
    Ok(Json(out))
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn image_png(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    // <img> tags cannot send headers, so a query token is accepted here
    let user = state.user(&headers, q.token.as_deref())?;
    state.assigned(&user, &id)?;
    let entry = state.store.image(&id)?;
    let bytes = if entry.path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        std::fs::read(&entry.path)?
    } else {
        let img = image::open(&entry.path).map_err(|e| ServiceError::Config(e.to_string()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        out.into_inner()
    };
    Ok(png_response(bytes))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_strokes(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Json<store::TracingRecord>, ServiceError> {
    let user = state.user(&headers, None)?;
    state.assigned(&user, &id)?;
    Ok(Json(state.store.record(&id, &user)?))
}

#[derive(Deserialize)]
struct StrokeBatch {
    strokes: Vec<Stroke>,
}

async fn post_strokes(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<StatusCode, ServiceError> {
    let user = state.user(&headers, None)?;
    state.assigned(&user, &id)?;
    let batch: StrokeBatch =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let entry = state.store.image(&id)?;
    for s in &batch.strokes {
        if !(s.width > 0.0 && s.width <= MAX_BRUSH_WIDTH) {
            return Err(ServiceError::BadRequest(format!(
                "brush width {} outside (0, {MAX_BRUSH_WIDTH}]",
                s.width
            )));
        }
        for &[x, y] in &s.points {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..=entry.width as f64).contains(&x)
                && (0.0..=entry.height as f64).contains(&y);
            if !inside {
                return Err(ServiceError::BadRequest(format!(
                    "point ({x}, {y}) outside the {}x{} image",
                    entry.width, entry.height
                )));
            }
        }
    }
    let lock = state.stream_lock(&id, &user);
    // a submit in progress holds the lock; appends must not wait behind it
    let _guard = lock
        .try_lock()
        .map_err(|_| ServiceError::Conflict("tracing is being submitted".into()))?;
    if state.store.is_submitted(&id, &user)? {
        return Err(ServiceError::Conflict("tracing already submitted".into()));
    }
    state.store.append(&id, &user, &batch.strokes)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn submit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<StatusCode, ServiceError> {
    let user = state.user(&headers, None)?;
    state.assigned(&user, &id)?;
    let lock = state.stream_lock(&id, &user);
    let _guard = lock.lock().await;
    if state.store.is_submitted(&id, &user)? {
        return Err(ServiceError::Conflict("tracing already submitted".into()));
    }
    let record = state.store.record(&id, &user)?;
    if !record.strokes.iter().any(|s| s.mode == StrokeMode::Draw) {
        return Err(ServiceError::BadRequest("nothing has been drawn".into()));
    }
    let entry = state.store.image(&id)?;
    let canvas = render_mask(&record.strokes, entry.width as usize, entry.height as usize);
    if canvas.is_empty() {
        return Err(ServiceError::BadRequest("the traced mask is empty".into()));
    }
    let png = mask_png_bytes(&canvas.to_tensor())?;
    state.store.submit(&id, &user, &png)?;
    log::info!("{user} submitted {id} ({} disc pixels)", canvas.area());
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct ExportQuery {
    annotator: String,
}

async fn export_one(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    state.user(&headers, None)?;
    state.store.image(&id)?;
    if !state.store.is_submitted(&id, &q.annotator)? {
        return Err(ServiceError::NotFound(format!(
            "no submitted tracing of '{id}' by '{}'",
            q.annotator
        )));
    }
    Ok(png_response(std::fs::read(state.store.mask_path(&id, &q.annotator)?)?))
}

async fn export_merged(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    state.user(&headers, None)?;
    state.store.image(&id)?;
    let annotators = state.store.submitted_annotators(&id)?;
    if annotators.is_empty() {
        return Err(ServiceError::NotFound(format!("no submitted tracings of '{id}'")));
    }
    let masks = annotators
        .iter()
        .map(|a| Ok(read_mask(state.store.mask_path(&id, a)?)?))
        .collect::<Result<Vec<_>, ServiceError>>()?;
    Ok(png_response(mask_png_bytes(&merge_annotations(&masks)?)?))
}

const FALLBACK_INDEX: &str = "<!doctype html><title>Disc tracing</title>\
<p>The tracing UI bundle is not installed. The JSON API is available under <code>/api</code>.</p>";

async fn static_file(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let Some(dir) = &state.static_dir else {
        return if rel == "index.html" {
            Html(FALLBACK_INDEX).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    if rel.split('/').any(|c| c == ".." || c.is_empty()) {
        return StatusCode::NOT_FOUND.into_response();
    }
    match std::fs::read(dir.join(rel)) {
        Ok(bytes) => {
            let mime = match rel.rsplit('.').next() {
                Some("html") => "text/html; charset=utf-8",
                Some("js") => "text/javascript",
                Some("css") => "text/css",
                Some("png") => "image/png",
                Some("svg") => "image/svg+xml",
                Some("json") => "application/json",
                _ => "application/octet-stream",
            };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}
