//! JSON API over an [`Engine`] snapshot.

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::ServiceError;

const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct PredictRequest {
    /// Gallery id or base64-encoded image.
    pub image: String,
    pub ehr: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probability: f64,
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/query", post(query))
        .route("/api/images/{id}", get(image))
        .route("/api/overlays/{id}", get(overlay))
        .route("/api/predict-intervention", post(predict))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(engine)
}

async fn health(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.health())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn query(State(engine): State<Arc<Engine>>, mut form: Multipart) -> Result<Response, ServiceError> {
    let mut image = None;
    let mut k = engine.config().default_k;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ServiceError::BadRequest(format!("multipart: {e}")))?
    {
        match field.name() {
            Some("image") => {
                let bytes = field
                    .bytes()
                    .await
                    .map_err(|e| ServiceError::BadRequest(format!("image field: {e}")))?;
                image = Some(bytes);
            }
            Some("k") => {
                let text = field
                    .text()
                    .await
                    .map_err(|e| ServiceError::BadRequest(format!("k field: {e}")))?;
                k = text
                    .trim()
                    .parse()
                    .map_err(|_| ServiceError::BadRequest(format!("k must be an integer, got `{text}`")))?;
            }
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ServiceError::BadRequest("missing `image` field".into()))?;
    engine.config().check_k(k)?;
    let response = tokio::task::spawn_blocking(move || engine.query_bytes(&image, k))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(response).into_response())
}

async fn image(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let bytes = tokio::task::spawn_blocking(move || engine.image_png(&id))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(png(bytes))
}

async fn overlay(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let bytes = tokio::task::spawn_blocking(move || engine.overlay_png(&id))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(png(bytes.as_ref().clone()))
}

async fn predict(
    State(engine): State<Arc<Engine>>,
    body: Result<Json<PredictRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ServiceError> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let probability = tokio::task::spawn_blocking(move || engine.predict_intervention(&req.image, &req.ehr))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(PredictResponse { probability }).into_response())
}

pub async fn serve(engine: Arc<Engine>) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", engine.config().host, engine.config().port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::Internal(format!("bind {addr}: {e}")))?;
    log::info!(
        "serving {} images (model {}) on http://{addr}",
        engine.health().index_size,
        engine.model_hash()
    );
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
