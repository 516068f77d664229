//! HTTP session service: one interactive segmentation episode per session,
//! driven click by click over JSON.

mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intseg::cascade::Pipeline;
use intseg::clicks::Polarity;
use intseg::data_io::{decode_upload, generate_scene, prob_to_png, SceneConfig, ShapeKind};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use session::{Session, SessionInfo, StepView};

/// Longest accepted image side.
pub const MAX_SIDE: usize = 1024;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Idle time after which a session is dropped.
    pub session_ttl: Duration,
    pub max_side: usize,
    /// Upload size limit in bytes.
    pub max_body: usize,
    /// Clicks a session may hold, which also bounds its undo history.
    pub max_clicks: usize,
    pub threshold: f64,
    /// Size and style of generated scenes.
    pub scene: SceneConfig,
    /// Directory served at `/` for the UI bundle.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            session_ttl: Duration::from_secs(1800),
            max_side: MAX_SIDE,
            max_body: 16 << 20,
            max_clicks: 20,
            threshold: 0.5,
            scene: SceneConfig::default(),
            static_dir: None,
        }
    }
}

type SessionRef = Arc<Mutex<Session>>;

pub struct AppState {
    pipeline: Arc<Pipeline>,
    sessions: StdMutex<HashMap<String, SessionRef>>,
    cfg: ServerConfig,
}

impl AppState {
    pub fn new(pipeline: Pipeline, cfg: ServerConfig) -> Arc<Self> {
        Arc::new(AppState {
            pipeline: Arc::new(pipeline),
            sessions: StdMutex::new(HashMap::new()),
            cfg,
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    fn get(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
    }

    /// Drops sessions idle for longer than the TTL. Sessions with a request
    /// in flight are kept.
    pub fn sweep_expired(&self, now: Instant) -> usize {
        let ttl = self.cfg.session_ttl;
        let mut table = self.sessions.lock().expect("session table");
        let before = table.len();
        table.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_active) <= ttl,
            Err(_) => true,
        });
        before - table.len()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    generate: GenerateRequest,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    kind: Option<String>,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClickRequest {
    row: i64,
    col: i64,
    polarity: Polarity,
}

#[derive(Serialize)]
struct StepResponse {
    #[serde(flatten)]
    view: StepView,
    prob_png_url: String,
}

fn respond(id: &str, view: StepView) -> Json<StepResponse> {
    let prob_png_url = format!("/sessions/{id}/prob.png?step={}", view.step);
    Json(StepResponse { view, prob_png_url })
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed JSON: {e}")))
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let cfg = app.cfg.clone();
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        if is_json(&headers) {
            let req: CreateRequest = parse_json(&body)?;
            let kind = req.generate.kind.as_deref().map(ShapeKind::parse).transpose()?;
            let scene = generate_scene(req.generate.seed, &cfg.scene, kind)?;
            Session::new(scene.image, Some(scene.gt), cfg.max_clicks)
        } else {
            Session::new(decode_upload(&body, cfg.max_side)?, None, cfg.max_clicks)
        }
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let (height, width) = session.dims();
    let id = format!("{:032x}", rand::random::<u128>());
    app.sessions
        .lock()
        .expect("session table")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    log::info!("session {id} created ({height}×{width})");
    Ok((
        StatusCode::CREATED,
        Json(Created {
            session_id: id,
            width,
            height,
        }),
    ))
}

async fn show_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ApiError> {
    let s = app.get(&id)?;
    let mut s = s.lock().await;
    s.last_active = Instant::now();
    Ok(Json(s.info()))
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match app.sessions.lock().expect("session table").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::NotFound(format!("no session `{id}`"))),
    }
}

/// Locks a session for mutation, refusing rather than queueing when another
/// request already holds it.
fn lock_for_mutation(app: &AppState, id: &str) -> Result<tokio::sync::OwnedMutexGuard<Session>, ApiError> {
    app.get(id)?
        .try_lock_owned()
        .map_err(|_| ApiError::Conflict(format!("session `{id}` is busy with another request")))
}

async fn add_click(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<StepResponse>, ApiError> {
    let req: ClickRequest = parse_json(&body)?;
    let mut guard = lock_for_mutation(&app, &id)?;
    if req.row < 0 || req.col < 0 {
        return Err(ApiError::Unprocessable(format!("click at ({}, {}) outside the image", req.row, req.col)));
    }
    let threshold = app.cfg.threshold;
    let pipeline = app.pipeline.clone();
    let view = tokio::task::spawn_blocking(move || {
        guard.last_active = Instant::now();
        guard.click(req.row as usize, req.col as usize, req.polarity, &pipeline)?;
        Ok::<_, ApiError>(guard.view(threshold))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(respond(&id, view))
}

async fn undo(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<StepResponse>, ApiError> {
    let mut guard = lock_for_mutation(&app, &id)?;
    guard.last_active = Instant::now();
    guard.undo()?;
    let view = guard.view(app.cfg.threshold);
    Ok(respond(&id, view))
}

async fn prob_png(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = app.get(&id)?;
    let prob = {
        let mut s = s.lock().await;
        s.last_active = Instant::now();
        s.prob()
    };
    let png = prob_to_png(&prob)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png).into_response())
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": app.session_count() }))
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such route".into())
}

pub fn router(app: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(show_session).delete(delete_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/prob.png", get(prob_png))
        .layer(DefaultBodyLimit::max(app.cfg.max_body));
    let api = match &app.cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(get(not_found).post(not_found))),
        None => api.fallback(not_found),
    };
    api.with_state(app)
}

/// Binds the configured address and serves until Ctrl-C. A background task
/// drops idle sessions.
pub async fn serve(app: Arc<AppState>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", app.cfg.host, app.cfg.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let sweeper = app.clone();
    let period = (app.cfg.session_ttl / 4).clamp(Duration::from_millis(100), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let dropped = sweeper.sweep_expired(Instant::now());
            if dropped > 0 {
                log::info!("expired {dropped} idle session(s)");
            }
        }
    });
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
