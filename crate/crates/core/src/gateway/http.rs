//! HTTP API.
//!
//! | route | |
//! |---|---|
//! | `POST /api/v1/jobs` | multipart: `video` or `video_url`, `detectors`, `email`, `pin` |
//! | `GET /api/v1/jobs/{job_id}` | `{"state", "detail"}` |
//! | `GET /api/v1/detectors` | registry metadata |
//! | `POST /api/v1/jobs/{job_id}/download` | `{"pin"}` → `application/zip` |
//!
//! Errors are `{"error": "<code>", "message": "..."}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::Field;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use tokio::io::AsyncWriteExt;

use super::fetch::{client, fetch_remote_video};
use super::{ApiError, Gateway, StagedVideo};
use crate::model::VideoOrigin;

/// Largest accepted non-file form field.
const MAX_TEXT_FIELD: usize = 64 * 1024;
pub const BUNDLE_DIGEST_HEADER: &str = "x-bundle-sha256";

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::Oversize { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::NotFound => StatusCode::NOT_FOUND,
            ApiError::WrongPin { .. } => StatusCode::FORBIDDEN,
            ApiError::NotReady(_) => StatusCode::CONFLICT,
            ApiError::LockedOut { .. } => StatusCode::TOO_MANY_REQUESTS,
            ApiError::FetchFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let mut body = serde_json::json!({"error": self.code(), "message": self.to_string()});
        match &self {
            ApiError::Job(e) => body["field"] = e.field().into(),
            ApiError::WrongPin { remaining } => body["remaining_attempts"] = (*remaining).into(),
            ApiError::NotReady(state) => body["state"] = state.as_str().into(),
            _ => {}
        }
        let mut resp = (status, Json(body)).into_response();
        if let ApiError::LockedOut { retry_after } = self {
            let secs = retry_after.as_secs().max(1).to_string();
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_str(&secs).expect("digits"));
        }
        resp
    }
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    http: reqwest::Client,
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    let state = AppState {
        gateway,
        http: client(),
    };
    Router::new()
        .route("/api/v1/jobs", post(submit).layer(DefaultBodyLimit::disable()))
        .route("/api/v1/jobs/{job_id}", get(status))
        .route("/api/v1/jobs/{job_id}/download", post(download))
        .route("/api/v1/detectors", get(detectors))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("port-in-use: {0}")]
    PortInUse(SocketAddr),
    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
}

/// Binds `addr`, returning `port-in-use` when it is taken.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::PortInUse(addr),
        _ => ServeError::Io(e),
    })
}

/// Serves the API and runs the background sync until `shutdown` resolves.
pub async fn serve(
    gateway: Arc<Gateway>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let ticker = {
        let gateway = gateway.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(gateway.config().sync_interval);
            every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                every.tick().await;
                let g = gateway.clone();
                let _ = tokio::task::spawn_blocking(move || g.tick()).await;
            }
        })
    };
    let result = axum::serve(listener, router(gateway))
        .with_graceful_shutdown(shutdown)
        .await;
    ticker.abort();
    result.map_err(ServeError::Io)
}

#[derive(Default)]
struct Form {
    video: Option<StagedVideo>,
    oversize: bool,
    video_url: Option<String>,
    detectors: Option<String>,
    email: Option<String>,
    pin: Option<String>,
}

async fn submit(State(app): State<AppState>, multipart: Multipart) -> Response {
    let mut form = Form::default();
    let result = submit_inner(&app, multipart, &mut form).await;
    if let Some(v) = form.video.take() {
        let _ = tokio::fs::remove_file(&v.path).await;
    }
    match result {
        Ok(job_id) => (StatusCode::CREATED, Json(serde_json::json!({"job_id": job_id}))).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn submit_inner(app: &AppState, mut multipart: Multipart, form: &mut Form) -> Result<String, ApiError> {
    let gateway = &app.gateway;
    let limit = gateway.config().max_upload_bytes;
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::BadRequest(e.body_text());
    let mut video_fields = 0;
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        match field.name().unwrap_or_default() {
            "video" => {
                video_fields += 1;
                match stream_to_file(field, limit, gateway.upload_dir()).await? {
                    Some(v) if video_fields == 1 => form.video = Some(v),
                    Some(v) => {
                        let _ = tokio::fs::remove_file(&v.path).await;
                    }
                    None => form.oversize = true,
                }
            }
            "video_url" => form.video_url = Some(text(field).await?),
            "detectors" => form.detectors = Some(text(field).await?),
            "email" => form.email = Some(text(field).await?),
            "pin" => form.pin = Some(text(field).await?),
            _ => drain(field).await?,
        }
    }
    if form.oversize {
        return Err(ApiError::Oversize { limit });
    }
    let url = form.video_url.as_deref().map(str::trim).filter(|u| !u.is_empty());
    if video_fields > 1 {
        return Err(ApiError::BadRequest("more than one video field".into()));
    }
    let staged = match (form.video.is_some(), url) {
        (true, Some(_)) => return Err(ApiError::BadRequest("send either video or video_url, not both".into())),
        (false, None) => return Err(ApiError::BadRequest("video or video_url is required".into())),
        (true, None) => form.video.take().expect("checked"),
        (false, Some(u)) => fetch_remote_video(&app.http, u, limit, &gateway.upload_dir()).await?,
    };
    let detectors: Vec<String> = form
        .detectors
        .as_deref()
        .unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let email = form.email.take().unwrap_or_default();
    let pin = form.pin.take().unwrap_or_default();
    let g = gateway.clone();
    let id = tokio::task::spawn_blocking(move || g.submit(staged, detectors, email.trim(), pin.trim()))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(id.to_string())
}

/// Streams a file field to disk. Returns `None` if it exceeds `limit`, in
/// which case the rest of the field is read and discarded so the client
/// still receives the error response.
async fn stream_to_file(mut field: Field<'_>, limit: u64, dir: PathBuf) -> Result<Option<StagedVideo>, ApiError> {
    let io = |e: std::io::Error| ApiError::Internal(e.to_string());
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::BadRequest(e.body_text());
    let tmp = tempfile::Builder::new().prefix("upload-").tempfile_in(&dir).map_err(io)?;
    let (file, path) = tmp.keep().map_err(|e| io(e.error))?;
    let mut file = tokio::fs::File::from_std(file);
    let mut size = 0u64;
    let outcome = loop {
        match field.chunk().await {
            Ok(Some(chunk)) => {
                size += chunk.len() as u64;
                if size > limit {
                    break Ok(false);
                }
                if let Err(e) = file.write_all(&chunk).await {
                    break Err(io(e));
                }
            }
            Ok(None) => break file.flush().await.map(|_| true).map_err(io),
            Err(e) => break Err(bad(e)),
        }
    };
    match outcome {
        Ok(true) => Ok(Some(StagedVideo {
            path,
            byte_size: size,
            origin: VideoOrigin::DirectUpload,
        })),
        Ok(false) => {
            drop(file);
            let _ = tokio::fs::remove_file(&path).await;
            drain(field).await?;
            Ok(None)
        }
        Err(e) => {
            let _ = tokio::fs::remove_file(&path).await;
            Err(e)
        }
    }
}

async fn drain(mut field: Field<'_>) -> Result<(), ApiError> {
    while field
        .chunk()
        .await
        .map_err(|e| ApiError::BadRequest(e.body_text()))?
        .is_some()
    {}
    Ok(())
}

async fn text(mut field: Field<'_>) -> Result<String, ApiError> {
    let name = field.name().unwrap_or_default().to_string();
    let mut buf = Vec::new();
    while let Some(chunk) = field.chunk().await.map_err(|e| ApiError::BadRequest(e.body_text()))? {
        buf.extend_from_slice(&chunk);
        if buf.len() > MAX_TEXT_FIELD {
            return Err(ApiError::BadRequest(format!("field {name} is too long")));
        }
    }
    String::from_utf8(buf).map_err(|_| ApiError::BadRequest(format!("field {name} is not UTF-8")))
}

async fn status(State(app): State<AppState>, Path(job_id): Path<String>) -> Response {
    let g = app.gateway.clone();
    match tokio::task::spawn_blocking(move || g.status(&job_id)).await {
        Ok(Ok(status)) => Json(status).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::Internal(e.to_string()).into_response(),
    }
}

async fn detectors(State(app): State<AppState>) -> Response {
    Json(app.gateway.detectors()).into_response()
}

#[derive(Deserialize)]
struct DownloadRequest {
    pin: String,
}

async fn download(State(app): State<AppState>, Path(job_id): Path<String>, body: Bytes) -> Response {
    let req: DownloadRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::BadRequest(format!("expected {{\"pin\": \"...\"}}: {e}")).into_response(),
    };
    let g = app.gateway.clone();
    let id = job_id.clone();
    match tokio::task::spawn_blocking(move || g.download(&id, &req.pin)).await {
        Ok(Ok(bytes)) => {
            let digest = hex::encode(Sha256::digest(&bytes));
            (
                StatusCode::OK,
                [
                    (header::CONTENT_TYPE, "application/zip".to_string()),
                    (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{job_id}.zip\"")),
                    (header::HeaderName::from_static(BUNDLE_DIGEST_HEADER), digest),
                ],
                bytes,
            )
                .into_response()
        }
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::Internal(e.to_string()).into_response(),
    }
}
