//! HTTP front end of the review queue.
//!
//! | route                       | success | errors                 |
//! |-----------------------------|---------|------------------------|
//! | `GET /api/queue/next`       | 200/204 | 400                    |
//! | `POST /api/decision`        | 200     | 400, 403, 404, 409, 422 |
//! | `GET /api/item/{id}`        | 200     | 404                    |
//! | `GET /api/progress`         | 200     |                        |
//! | `POST /api/audit`           | 200     | 400                    |
//!
//! Errors carry `{"error": <kind>, "message": <text>}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use segcurate_core::review::{ReviewDecision, ReviewError, ReviewStore};

#[derive(Debug, Clone, Default)]
pub struct StaticDirs {
    /// Served under `/images`.
    pub images: Option<PathBuf>,
    /// Served at `/` (the review UI bundle).
    pub ui: Option<PathBuf>,
}

pub struct ApiError(ReviewError);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        ApiError(e)
    }
}

fn error_body(status: StatusCode, kind: &str, message: String) -> Response {
    (status, Json(serde_json::json!({ "error": kind, "message": message }))).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            ReviewError::EmptyReviewer => (StatusCode::BAD_REQUEST, "empty_reviewer"),
            ReviewError::InvalidFraction(_) => (StatusCode::BAD_REQUEST, "invalid_fraction"),
            ReviewError::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            ReviewError::NotLeasedToYou(_) => (StatusCode::FORBIDDEN, "not_leased_to_you"),
            ReviewError::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
            ReviewError::DuplicateItem(_) => (StatusCode::CONFLICT, "duplicate_item"),
            ReviewError::RubricVerdictMismatch(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "rubric_verdict_mismatch")
            }
            ReviewError::Replay { .. } | ReviewError::Io(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        error_body(status, kind, self.0.to_string())
    }
}

type AppState = Arc<ReviewStore>;

#[derive(Deserialize)]
struct NextQuery {
    #[serde(default)]
    reviewer: String,
}

async fn next_item(State(store): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    Ok(match store.next_item(&q.reviewer)? {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn decision(State(store): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let decision: ReviewDecision = match serde_json::from_slice(&body) {
        Ok(d) => d,
        Err(e) => return Ok(error_body(StatusCode::BAD_REQUEST, "bad_request", e.to_string())),
    };
    Ok(Json(store.submit_decision(decision)?).into_response())
}

async fn item(State(store): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    match store.item(&id) {
        Some(item) => Ok(Json(item).into_response()),
        None => Err(ReviewError::UnknownItem(id).into()),
    }
}

async fn progress(State(store): State<AppState>) -> Response {
    Json(store.progress()).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditRequest {
    fraction: f64,
    #[serde(default)]
    seed: u64,
}

async fn audit(State(store): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: AuditRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return Ok(error_body(StatusCode::BAD_REQUEST, "bad_request", e.to_string())),
    };
    Ok(Json(store.sample_audit(req.fraction, req.seed)?).into_response())
}

pub fn router(store: Arc<ReviewStore>, dirs: StaticDirs) -> Router {
    let mut app = Router::new()
        .route("/api/queue/next", get(next_item))
        .route("/api/decision", post(decision))
        .route("/api/item/{id}", get(item))
        .route("/api/progress", get(progress))
        .route("/api/audit", post(audit))
        .with_state(store);
    if let Some(images) = dirs.images {
        app = app.nest_service("/images", ServeDir::new(images));
    }
    if let Some(ui) = dirs.ui {
        app = app.fallback_service(ServeDir::new(ui).append_index_html_on_directories(true));
    }
    app
}
