use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AnnotatorTask, Answer, HumanResponse, StudyConfig, StudyError, StudyMode, StudyRegistry};
use crate::prompt::{EvalItem, EvalItemRecord};

/// Shared handle to the registry. Every handler holds the lock for the whole
/// read-validate-log-apply sequence, so concurrent submissions serialize.
#[derive(Clone)]
pub struct AppState {
    registry: Arc<Mutex<StudyRegistry>>,
}

impl AppState {
    pub fn new(registry: StudyRegistry) -> Self {
        AppState { registry: Arc::new(Mutex::new(registry)) }
    }

    pub fn lock(&self) -> MutexGuard<'_, StudyRegistry> {
        self.registry.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/studies", post(create_study).get(list_studies))
        .route("/v1/studies/{id}/next", get(next_task))
        .route("/v1/studies/{id}/responses", post(submit_response))
        .route("/v1/studies/{id}/agreement", get(agreement))
        .route("/v1/studies/{id}/reference-scores", get(reference_scores))
        .route("/v1/images/{key}", get(image))
        .route("/v1/annotators", post(issue_annotator))
        .with_state(state)
}

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<StudyError> for ApiError {
    fn from(err: StudyError) -> Self {
        let (status, kind) = match &err {
            StudyError::NoItems | StudyError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            StudyError::UnknownStudy(_) | StudyError::UnknownTask(_) => (StatusCode::NOT_FOUND, "not_found"),
            StudyError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            StudyError::InsufficientData => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_data"),
            StudyError::Mode { .. } => (StatusCode::CONFLICT, "wrong_mode"),
            StudyError::Incomplete(_) => (StatusCode::UNPROCESSABLE_ENTITY, "incomplete"),
            StudyError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        let mut body = json!({ "error": kind, "message": err.to_string() });
        if let StudyError::Incomplete(tasks) = &err {
            body["unanswered"] = json!(tasks);
        }
        ApiError(status, body)
    }
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": "validation", "message": message.into() }))
}

#[derive(Debug, Deserialize)]
struct CreateStudyRequest {
    mode: StudyMode,
    items: Vec<EvalItemRecord>,
    #[serde(default)]
    redundancy: Option<usize>,
}

async fn create_study(
    State(state): State<AppState>,
    body: Result<Json<CreateStudyRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let mut config = StudyConfig::default();
    if let Some(r) = req.redundancy {
        if r == 0 {
            return Err(bad_request("redundancy must be at least 1"));
        }
        config.redundancy = r;
    }
    let items: Vec<EvalItem> = req.items.into_iter().map(EvalItem::from).collect();
    let mut reg = state.lock();
    let (study_id, warnings) = reg.create_study(&items, req.mode, config)?;
    let n_tasks = reg.study(&study_id)?.tasks.len();
    Ok((StatusCode::CREATED, Json(json!({ "study_id": study_id, "mode": req.mode, "n_tasks": n_tasks, "warnings": warnings }))))
}

async fn list_studies(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.lock().summaries())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Debug, Serialize)]
struct Progress {
    answered: usize,
    total: usize,
}

#[derive(Debug, Serialize)]
struct NextResponse {
    done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<AnnotatorTask>,
    progress: Progress,
}

async fn next_task(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<NextQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<NextResponse>, ApiError> {
    let Query(q) = query.map_err(|e| bad_request(e.body_text()))?;
    if q.annotator.trim().is_empty() {
        return Err(bad_request("annotator is empty"));
    }
    let reg = state.lock();
    let study = reg.study(&id)?;
    let task = study.next_task(&q.annotator).map(|t| t.blinded());
    Ok(Json(NextResponse {
        done: task.is_none(),
        task,
        progress: Progress { answered: study.answered_by(&q.annotator), total: study.tasks.len() },
    }))
}

#[derive(Debug, Deserialize)]
struct SubmitRequest {
    task_id: String,
    annotator_id: String,
    answer: Answer,
    #[serde(default)]
    timestamp: Option<u64>,
}

async fn submit_response(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<SubmitRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let timestamp = req.timestamp.unwrap_or_else(|| {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    });
    let response = HumanResponse { task_id: req.task_id, annotator_id: req.annotator_id, answer: req.answer, timestamp };
    state.lock().submit(&id, response)?;
    Ok((StatusCode::CREATED, Json(json!({ "status": "stored" }))))
}

async fn agreement(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(state.lock().study(&id)?.agreement()?))
}

async fn reference_scores(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(state.lock().study(&id)?.human_reference_scores()?))
}

async fn image(State(state): State<AppState>, Path(key): Path<String>) -> Result<Response, ApiError> {
    let path = state.lock().image_path(&key).map(str::to_owned);
    let not_found = || ApiError(StatusCode::NOT_FOUND, json!({ "error": "not_found", "message": format!("no image `{key}`") }));
    let path = path.ok_or_else(not_found)?;
    let bytes = std::fs::read(&path).map_err(|e| {
        tracing::warn!(%path, "cannot read registered image: {e}");
        not_found()
    })?;
    let lower = path.to_ascii_lowercase();
    let mime = if lower.ends_with(".jpg") || lower.ends_with(".jpeg") { "image/jpeg" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn issue_annotator(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let annotator_id = state.lock().issue_annotator()?;
    Ok((StatusCode::CREATED, Json(json!({ "annotator_id": annotator_id }))))
}
