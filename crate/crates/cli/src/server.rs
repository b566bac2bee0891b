//! HTTP front of the review store.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fpage_core::review::{ReviewDecision, ReviewStore, DEFAULT_PAGE_SIZE};
use fpage_core::Error;
use serde::Deserialize;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub const IMAGE_ROOT_ENV: &str = "FPAGE_IMAGE_ROOT";

type Shared = Arc<RwLock<ReviewStore>>;

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownSubject(_) => StatusCode::NOT_FOUND,
            Error::InvalidDecision(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    #[serde(default)]
    cursor: usize,
    limit: Option<usize>,
    #[serde(default)]
    include_decided: bool,
}

async fn queue(State(store): State<Shared>, Query(q): Query<QueueParams>) -> impl IntoResponse {
    let store = store.read().expect("review store lock");
    Json(store.queue(q.cursor, q.limit.unwrap_or(DEFAULT_PAGE_SIZE), q.include_decided))
}

async fn subject(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let view = store.read().expect("review store lock").subject(&id)?;
    Ok(Json(view))
}

// The write lock is held across the fsync: decisions are serialized and
// nothing is acknowledged before it is durable.
async fn decision(State(store): State<Shared>, Json(d): Json<ReviewDecision>) -> Result<impl IntoResponse, ApiError> {
    let stored = tokio::task::spawn_blocking(move || store.write().expect("review store lock").decide(d))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(stored))
}

async fn export(State(store): State<Shared>) -> impl IntoResponse {
    let body = store.read().expect("review store lock").export();
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body)
}

pub fn router(store: ReviewStore, image_root: Option<PathBuf>) -> Router {
    let shared: Shared = Arc::new(RwLock::new(store));
    let mut app = Router::new()
        .route("/queue", get(queue))
        .route("/subject/{id}", get(subject))
        .route("/decision", post(decision))
        .route("/export", get(export))
        .with_state(shared);
    if let Some(root) = image_root {
        app = app.nest_service("/thumbs", ServeDir::new(root));
    }
    app.layer(CorsLayer::permissive())
}

pub async fn serve(store: ReviewStore, image_root: Option<PathBuf>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, image_root))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
