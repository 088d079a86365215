//! HTTP endpoints for annotation clients.
//!
//! | method | path                    | body / response                                        |
//! |--------|-------------------------|--------------------------------------------------------|
//! | GET    | `/session/{id}`         | session fields plus `records` (all stored judgments)   |
//! | GET    | `/item/{id}/image`      | image bytes; `id` is the image asset id                |
//! | POST   | `/session/{id}/record`  | `{annotator, item_index, judgment}` → stored record    |
//! | GET    | `/session/{id}/stats`   | `{positive_rate, fleiss_kappa, degenerate, ...}`       |
//!
//! Errors are `{"error": message}` with 400 (bad request), 404 (unknown
//! session or image), or 409 (conflicting judgment, which also carries the
//! `stored` judgment; or stats over incomplete items, with
//! `incomplete_items`). When a UI directory is configured its files are
//! served for every other GET path, `index.html` at `/`.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use contrastaug_core::gateway::http::sniff_mime;
use contrastaug_core::human_eval::{
    agreement_stats, AnnotationRecord, AnnotationSession, HumanEvalError, Judgment, Recorded, SessionStore,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    /// Root that session image paths are relative to.
    pub corpus: PathBuf,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SessionView {
    #[serde(flatten)]
    session: AnnotationSession,
    records: Vec<AnnotationRecord>,
}

#[derive(Debug, Deserialize)]
struct RecordBody {
    #[serde(default)]
    session: Option<String>,
    annotator: String,
    item_index: usize,
    judgment: Judgment,
}

struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self(status, json!({ "error": message.to_string() }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<HumanEvalError> for ApiError {
    fn from(e: HumanEvalError) -> Self {
        let msg = e.to_string();
        match e {
            HumanEvalError::UnknownSession(_) => ApiError::new(StatusCode::NOT_FOUND, msg),
            HumanEvalError::BadItem { .. } | HumanEvalError::UnknownAnnotator(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, msg)
            }
            HumanEvalError::Conflict { stored, .. } => {
                ApiError(StatusCode::CONFLICT, json!({ "error": msg, "stored": stored }))
            }
            HumanEvalError::Incomplete(items) => {
                ApiError(StatusCode::CONFLICT, json!({ "error": msg, "incomplete_items": items }))
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, msg),
        }
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
}

async fn get_session(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || {
        let (session, records) = st.store.load(&id)?;
        Ok(Json(SessionView { session, records }))
    })
    .await
}

async fn post_record(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<RecordBody>,
) -> Result<Response, ApiError> {
    if body.session.as_ref().is_some_and(|s| s != &id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "session in body does not match the URL"));
    }
    blocking(move || {
        Ok(match st.store.record(&id, &body.annotator, body.item_index, body.judgment)? {
            Recorded::Stored(r) => (StatusCode::CREATED, Json(r)).into_response(),
            Recorded::Replayed(r) => (StatusCode::OK, Json(r)).into_response(),
        })
    })
    .await
}

async fn get_stats(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    blocking(move || {
        let (session, records) = st.store.load(&id)?;
        Ok(Json(agreement_stats(&session, &records)?).into_response())
    })
    .await
}

async fn get_image(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    blocking(move || {
        for sid in st.store.list()? {
            let (session, _) = st.store.load(&sid)?;
            if let Some(item) = session.items.iter().find(|i| i.image == id) {
                let path = st.corpus.join(&item.image_path);
                let bytes = std::fs::read(&path)
                    .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
                return Ok(([(header::CONTENT_TYPE, sniff_mime(&bytes))], bytes).into_response());
            }
        }
        Err(ApiError::new(StatusCode::NOT_FOUND, format!("no session item with image {id}")))
    })
    .await
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(st): State<AppState>, uri: Uri) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("{} not found", uri.path()));
    let Some(dir) = st.ui_dir.clone() else { return Err(not_found()) };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    let path = dir.join(rel);
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session/:id", get(get_session))
        .route("/session/:id/record", post(post_record))
        .route("/session/:id/stats", get(get_stats))
        .route("/item/:id/image", get(get_image))
        .fallback(get(static_file))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "annotation server listening");
    axum::serve(listener, router(state)).await
}
