//! HTTP front end for the annotation store.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{AnnotationError, AnnotationStore, AnnotatorProfile, Submission};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<AnnotationStore>,
    /// Shared bearer token; no auth when `None`.
    pub token: Option<String>,
}

impl AppState {
    /// Reads the token from `config.token_env` when set.
    pub fn from_store(store: Arc<AnnotationStore>) -> Result<AppState, AnnotationError> {
        let token = match &store.config().token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                AnnotationError::StorageUnavailable(format!("token variable `{var}` is not set"))
            })?),
            None => None,
        };
        Ok(AppState { store, token })
    }
}

impl IntoResponse for AnnotationError {
    fn into_response(self) -> Response {
        use AnnotationError::*;
        let (status, kind) = match &self {
            UnknownPair(_) => (StatusCode::NOT_FOUND, "unknown_pair"),
            UnknownAnnotator(_) => (StatusCode::NOT_FOUND, "unknown_annotator"),
            InactiveAnnotator(_) => (StatusCode::FORBIDDEN, "inactive_annotator"),
            DuplicateAnnotation { .. } => (StatusCode::CONFLICT, "duplicate_annotation"),
            PairClosed(_) => (StatusCode::CONFLICT, "pair_closed"),
            LeaseExpired { .. } => (StatusCode::CONFLICT, "lease_expired"),
            NoLease { .. } => (StatusCode::CONFLICT, "no_lease"),
            InvalidProfile(_) | Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            StorageUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "storage_unavailable"),
        };
        (status, Json(json!({ "error": kind, "message": self.to_string() }))).into_response()
    }
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return (
                StatusCode::UNAUTHORIZED,
                Json(json!({ "error": "unauthorized", "message": "missing or wrong bearer token" })),
            )
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(State(s): State<AppState>, Query(q): Query<NextQuery>) -> Response {
    match s.store.next_task(&q.annotator) {
        Ok(Some(task)) => Json(task).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => e.into_response(),
    }
}

async fn submit(State(s): State<AppState>, Json(sub): Json<Submission>) -> Response {
    match s.store.submit_annotation(sub) {
        Ok(status) => Json(json!({ "status": status })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn pair_state(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    match s.store.pair_state(&id) {
        Ok(snap) => Json(snap).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn progress(State(s): State<AppState>) -> Response {
    match s.store.progress_stats() {
        Ok(p) => Json(p).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn ingest(State(s): State<AppState>, body: String) -> Response {
    match s.store.ingest_pairs(&body) {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn register(State(s): State<AppState>, Json(p): Json<AnnotatorProfile>) -> Response {
    match s.store.register_annotator(p) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => e.into_response(),
    }
}

/// All annotations as newline-delimited records.
async fn export_annotations(State(s): State<AppState>) -> Response {
    match s.store.annotations() {
        Ok(all) => {
            let mut body = String::new();
            for a in all {
                body.push_str(&serde_json::to_string(&a).expect("serializable"));
                body.push('\n');
            }
            ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
        }
        Err(e) => e.into_response(),
    }
}

fn content_type(uri: &str) -> &'static str {
    let ext = uri.rsplit('.').next().unwrap_or_default().to_ascii_lowercase();
    match ext.as_str() {
        "wav" => "audio/wav",
        "mp3" => "audio/mpeg",
        "flac" => "audio/flac",
        "ogg" | "opus" => "audio/ogg",
        "m4a" => "audio/mp4",
        _ => "application/octet-stream",
    }
}

async fn audio(State(s): State<AppState>, Path(audio_id): Path<String>) -> Response {
    let uri = match s.store.audio_uri(&audio_id) {
        Ok(Some(u)) => u,
        Ok(None) => {
            return (
                StatusCode::NOT_FOUND,
                Json(json!({ "error": "unknown_audio", "message": format!("unknown audio `{audio_id}`") })),
            )
                .into_response()
        }
        Err(e) => return e.into_response(),
    };
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return (StatusCode::TEMPORARY_REDIRECT, [(header::LOCATION, uri)]).into_response();
    }
    let rel = uri.strip_prefix("file://").unwrap_or(&uri);
    let path = match &s.store.config().audio_root {
        Some(root) if !std::path::Path::new(rel).is_absolute() => root.join(rel),
        _ => PathBuf::from(rel),
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&uri))], Body::from(bytes)).into_response(),
        Err(e) => (
            StatusCode::NOT_FOUND,
            Json(json!({ "error": "audio_unavailable", "message": format!("{}: {e}", path.display()) })),
        )
            .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(submit).get(export_annotations))
        .route("/api/pairs", post(ingest))
        .route("/api/pairs/{id}", get(pair_state))
        .route("/api/progress", get(progress))
        .route("/api/audio/{audio_id}", get(audio))
        .route("/api/annotators", post(register))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
