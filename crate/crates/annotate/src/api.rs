//! HTTP interface. Clients authenticate with `Authorization: Bearer <token>`
//! (or `X-Session-Token`) using the token returned by `POST /sessions`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use ciw_core::dataset::{parse_label, write_labeled_records};

use crate::model::Status;
use crate::store::{Store, StoreError};

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            StoreError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            StoreError::InvalidCredentials(_) => (StatusCode::UNAUTHORIZED, "invalid_credentials"),
            StoreError::Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            StoreError::InvalidTransition { .. } => (StatusCode::CONFLICT, "invalid_transition"),
            StoreError::LeaseConflict { .. } => (StatusCode::CONFLICT, "lease_conflict"),
            StoreError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            StoreError::Io(_) | StoreError::Json(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        let mut body = json!({"error": {"kind": kind, "message": self.to_string()}});
        if let StoreError::InvalidTransition { state, .. } | StoreError::LeaseConflict { state, .. } = &self {
            body["state"] = serde_json::to_value(state).unwrap_or_default();
        }
        (status, Json(body)).into_response()
    }
}

fn token(headers: &HeaderMap) -> Result<String, StoreError> {
    if let Some(v) = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        if let Some(t) = v.strip_prefix("Bearer ") {
            return Ok(t.trim().to_string());
        }
    }
    headers
        .get("x-session-token")
        .and_then(|v| v.to_str().ok())
        .map(|t| t.trim().to_string())
        .ok_or(StoreError::Unauthorized)
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, StoreError> {
    serde_json::from_slice(body).map_err(|e| StoreError::BadRequest(format!("invalid body: {e}")))
}

#[derive(Deserialize, Default)]
struct SessionRequest {
    annotator_id: Option<String>,
    password: Option<String>,
}

async fn create_session(State(store): State<Arc<Store>>, body: Bytes) -> Result<Response, StoreError> {
    let req: SessionRequest = if body.iter().all(u8::is_ascii_whitespace) {
        SessionRequest::default()
    } else {
        json_body(&body)?
    };
    let session = match (&req.annotator_id, &req.password) {
        (None, None) => store.open_session(None)?,
        (Some(user), password) => store.open_session(Some((user, password.as_deref().unwrap_or(""))))?,
        (None, Some(_)) => return Err(StoreError::BadRequest("password given without annotator_id".into())),
    };
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

async fn queue_next(State(store): State<Arc<Store>>, headers: HeaderMap) -> Result<Response, StoreError> {
    match store.next_instance(&token(&headers)?)? {
        Some(item) => Ok(Json(item).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

#[derive(Deserialize)]
struct LabelRequest {
    label: String,
    #[serde(default)]
    suggestion_ack: bool,
}

async fn submit_label(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, StoreError> {
    let token = token(&headers)?;
    let req: LabelRequest = json_body(&body)?;
    let label = parse_label(&req.label).map_err(|e| StoreError::BadRequest(e.to_string()))?;
    let (record, state) = store.submit_label(&token, &id, label, req.suggestion_ack)?;
    Ok((StatusCode::CREATED, Json(json!({"record": record, "state": state}))).into_response())
}

#[derive(Deserialize)]
struct AdjudicateRequest {
    label: String,
}

async fn adjudicate(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, StoreError> {
    let token = token(&headers)?;
    let req: AdjudicateRequest = json_body(&body)?;
    let label = parse_label(&req.label).map_err(|e| StoreError::BadRequest(e.to_string()))?;
    Ok(Json(store.adjudicate(&token, &id, label)?).into_response())
}

async fn get_instance(State(store): State<Arc<Store>>, Path(id): Path<String>) -> Result<Response, StoreError> {
    Ok(Json(store.get(&id)?).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    status: Option<String>,
}

/// Comma-separated statuses; agreed and resolved when absent.
pub fn parse_status_filter(raw: Option<&str>) -> Result<Vec<Status>, String> {
    match raw.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(vec![Status::Agreed, Status::Resolved]),
        Some(list) => list.split(',').map(str::parse).collect(),
    }
}

async fn export(State(store): State<Arc<Store>>, Query(q): Query<ExportQuery>) -> Result<Response, StoreError> {
    let filter = parse_status_filter(q.status.as_deref()).map_err(StoreError::BadRequest)?;
    let mut out = Vec::new();
    write_labeled_records(&mut out, &store.export(&filter))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}

async fn stats(State(store): State<Arc<Store>>) -> Response {
    Json(store.stats()).into_response()
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/queue/next", get(queue_next))
        .route("/instances/{id}", get(get_instance))
        .route("/instances/{id}/labels", post(submit_label))
        .route("/instances/{id}/adjudicate", post(adjudicate))
        .route("/export", get(export))
        .route("/stats", get(stats))
        .with_state(store)
}

/// Serve until the process receives Ctrl-C.
pub async fn serve(store: Arc<Store>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
