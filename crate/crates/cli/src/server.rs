//! HTTP transport over [`SessionManager`]. Model work runs on the blocking pool.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;

use promptseg::interface::wire::{Axis, Layer};
use promptseg::interface::{ApiError, ApiResult, SessionManager};

/// Uploaded volumes are base64 VGRID; 128³ float32 is about 11 MB encoded.
const MAX_BODY: usize = 512 << 20;

struct HttpError(ApiError);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": { "code": self.0.code, "message": self.0.message } }))).into_response()
    }
}

fn bad_request(code: &'static str, message: impl Into<String>) -> HttpError {
    HttpError(ApiError { status: 400, code, message: message.into() })
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, HttpError> {
    serde_json::from_slice(body).map_err(|e| bad_request("format", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> Result<T, HttpError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| HttpError(ApiError { status: 500, code: "internal", message: e.to_string() }))?
        .map_err(HttpError)
}

type Shared = Arc<SessionManager>;

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}/prompts", post(prompts))
        .route("/sessions/{id}/slice", get(slice))
        .route("/sessions/{id}/state", get(state))
        .route("/sessions/{id}/export", get(export))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(manager)
}

async fn healthz(State(m): State<Shared>) -> impl IntoResponse {
    Json(json!({ "status": "ok", "sessions": m.session_count(), "checkpoints": m.registry().ids() }))
}

async fn create(State(m): State<Shared>, body: Bytes) -> Result<impl IntoResponse, HttpError> {
    let req = parse(&body)?;
    let resp = blocking(move || m.create(req)).await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn prompts(State(m): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, HttpError> {
    let req = parse(&body)?;
    Ok(Json(blocking(move || m.submit(&id, &req)).await?))
}

async fn slice(
    State(m): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<impl IntoResponse, HttpError> {
    let axis = match q.get("axis").map(String::as_str).unwrap_or("z") {
        "z" => Axis::Z,
        "y" => Axis::Y,
        "x" => Axis::X,
        other => return Err(bad_request("invalid", format!("unknown axis {other:?}"))),
    };
    let layer = match q.get("layer").map(String::as_str).unwrap_or("image") {
        "image" => Layer::Image,
        "mask" => Layer::Mask,
        "prompts" => Layer::Prompts,
        other => return Err(bad_request("invalid", format!("unknown layer {other:?}"))),
    };
    let index: usize = q
        .get("index")
        .ok_or_else(|| bad_request("invalid", "missing index"))?
        .parse()
        .map_err(|_| bad_request("invalid", "index must be a non-negative integer"))?;
    Ok(Json(blocking(move || m.slice(&id, axis, index, layer)).await?))
}

async fn state(State(m): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, HttpError> {
    Ok(Json(blocking(move || m.state(&id)).await?))
}

async fn export(State(m): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, HttpError> {
    Ok(Json(blocking(move || m.export(&id)).await?))
}

/// Bind, announce the address on stdout, and serve until Ctrl-C.
pub async fn run(host: &str, port: u16, manager: Shared, ttl: Duration) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    std::io::stdout().flush()?;

    let sweeper = Arc::clone(&manager);
    let period = (ttl / 4).clamp(Duration::from_millis(100), Duration::from_secs(30));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let m = Arc::clone(&sweeper);
            match tokio::task::spawn_blocking(move || m.evict_idle(Instant::now())).await {
                Ok(Ok(ids)) if !ids.is_empty() => eprintln!("evicted {}", ids.join(", ")),
                Ok(Err(e)) => eprintln!("eviction failed: {e}"),
                _ => {}
            }
        }
    });

    axum::serve(listener, router(manager))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
