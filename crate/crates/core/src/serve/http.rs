use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::services::ServeDir;

use super::{CaptionRequest, Service, ServiceError};
use crate::error::{Error, Result};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self }))).into_response()
    }
}

async fn health(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    Json(json!({ "status": "ok", "kind": svc.kind(), "samples": svc.len() }))
}

async fn samples(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    Json(svc.samples())
}

async fn caption(
    State(svc): State<Arc<Service>>,
    body: std::result::Result<Json<CaptionRequest>, JsonRejection>,
) -> std::result::Result<Response, ServiceError> {
    let Json(req) = body.map_err(|e| ServiceError {
        status: 400,
        kind: "invalid_request",
        field: None,
        message: e.body_text(),
    })?;
    Ok(Json(svc.caption(&req)?).into_response())
}

/// API routes, plus static files from `static_dir` for every other path.
pub fn router(service: Arc<Service>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(samples))
        .route("/api/caption", post(caption))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub fn run(service: Service, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(format!("bind {addr}"), e))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(Arc::new(service), static_dir))
            .await
            .map_err(|e| Error::io("server", e))
    })
}
