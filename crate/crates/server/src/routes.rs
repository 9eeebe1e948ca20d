use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{FromRequestParts, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use agentrt::events::ContentPart;
use agentrt::secrets::SecretSource;
use agentrt::security::{ConfirmationDecision, ConfirmationPolicy};
use agentrt::workspace::WorkspaceError;

use crate::error::ApiFailure;
use crate::host::{CreateRequest, Host};
use crate::stream;

pub type Shared = Arc<Host>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiFailure> + Send + 'static,
) -> Result<T, ApiFailure> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiFailure::internal(e.to_string()))?
}

fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiFailure> {
    serde_json::from_slice(bytes).map_err(|e| ApiFailure::bad_request("invalid_body", e.to_string()))
}

fn keys_match(given: &str, expected: &str) -> bool {
    let (a, b) = (given.as_bytes(), expected.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Deserialize)]
struct KeyQuery {
    api_key: Option<String>,
}

/// Bearer header for REST; `api_key` query parameter for browsers opening a
/// WebSocket, which cannot set headers.
pub async fn require_key(State(host): State<Shared>, request: Request, next: Next) -> Response {
    let expected = host.config.api_key.as_deref().unwrap_or_default();
    let from_header = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    let from_query = Query::<KeyQuery>::try_from_uri(request.uri()).ok().and_then(|q| q.0.api_key);
    let authorized = !expected.is_empty()
        && [from_header, from_query].into_iter().flatten().any(|k| keys_match(&k, expected));
    if !authorized {
        return ApiFailure::unauthorized().into_response();
    }
    next.run(request).await
}

pub async fn health(State(host): State<Shared>) -> Json<Value> {
    Json(json!({ "status": "ok", "conversations": host.count() }))
}

pub async fn create_conversation(State(host): State<Shared>, body: Bytes) -> Result<Response, ApiFailure> {
    let request: CreateRequest = parse_body(&body)?;
    let record = blocking(move || host.create(request)?.record()).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

pub async fn list_conversations(State(host): State<Shared>) -> Result<Json<Value>, ApiFailure> {
    blocking(move || {
        let records = host.list().iter().map(|h| h.record()).collect::<Result<Vec<_>, _>>()?;
        Ok(Json(Value::Array(records)))
    })
    .await
}

pub async fn get_conversation(State(host): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiFailure> {
    let hosted = host.get(&id)?;
    blocking(move || hosted.record().map(Json)).await
}

const DELETE_GRACE: Duration = Duration::from_secs(30);

pub async fn delete_conversation(State(host): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiFailure> {
    let hosted = host.remove(&id)?;
    hosted.conversation.pause();
    blocking(move || {
        let deadline = Instant::now() + DELETE_GRACE;
        while hosted.conversation.is_running() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(20));
        }
        if let Err(e) = std::fs::remove_dir_all(&hosted.root) {
            log::warn!("could not remove {}: {e}", hosted.root.display());
        }
        log::info!("deleted conversation {}", hosted.id());
        Ok(Json(json!({ "deleted": hosted.id() })))
    })
    .await
}

#[derive(Deserialize, Default)]
pub struct EventsQuery {
    #[serde(default)]
    since: usize,
}

/// JSON list of frames for plain GET; the live stream for a WebSocket
/// upgrade on the same path.
pub async fn events(
    State(host): State<Shared>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    request: Request,
) -> Result<Response, ApiFailure> {
    let (mut parts, _) = request.into_parts();
    if parts.headers.contains_key(header::UPGRADE) {
        let upgrade = axum::extract::ws::WebSocketUpgrade::from_request_parts(&mut parts, &host)
            .await
            .map_err(|e| ApiFailure::bad_request("invalid_upgrade", e.body_text()))?;
        let hosted = host.get(&id).ok();
        let queue = host.config.stream_queue;
        return Ok(upgrade.on_upgrade(move |socket| stream::serve(socket, hosted, query.since, queue)));
    }
    let hosted = host.get(&id)?;
    let since = query.since;
    blocking(move || {
        let events = hosted.conversation.events()?;
        let frames: Vec<String> = events
            .iter()
            .enumerate()
            .skip(since)
            .map(|(index, event)| stream::frame_text(index, event))
            .collect();
        let body = format!("[{}]", frames.join(","));
        Ok(([(header::CONTENT_TYPE, "application/json")], Body::from(body)).into_response())
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageRequest {
    content: Vec<ContentPart>,
}

pub async fn send_message(
    State(host): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiFailure> {
    let hosted = host.get(&id)?;
    let request: MessageRequest = parse_body(&body)?;
    blocking(move || {
        hosted.conversation.send_content(request.content)?;
        Ok(Json(json!({ "queued": hosted.conversation.is_running() })))
    })
    .await
}

pub async fn run(State(host): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiFailure> {
    let hosted = host.get(&id)?;
    let since = blocking(move || Ok(hosted.conversation.spawn_run()?.0)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "since": since }))).into_response())
}

pub async fn pause(State(host): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiFailure> {
    let hosted = host.get(&id)?;
    hosted.conversation.pause();
    Ok((StatusCode::ACCEPTED, Json(json!({ "pause_requested": true }))).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfirmationRequest {
    decision: ConfirmationDecision,
    #[serde(default)]
    note: Option<String>,
}

pub async fn confirmation(
    State(host): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiFailure> {
    let hosted = host.get(&id)?;
    let request: ConfirmationRequest = parse_body(&body)?;
    let since = blocking(move || Ok(hosted.conversation.spawn_confirm(request.decision, request.note)?.0)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "since": since }))).into_response())
}

pub async fn set_policy(
    State(host): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiFailure> {
    let hosted = host.get(&id)?;
    let policy: ConfirmationPolicy = parse_body(&body)?;
    blocking(move || {
        hosted.conversation.set_confirmation_policy(policy)?;
        hosted.record().map(Json)
    })
    .await
}

pub async fn update_secrets(
    State(host): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiFailure> {
    let hosted = host.get(&id)?;
    let patch: BTreeMap<String, String> = parse_body(&body)?;
    if patch.keys().any(|k| k.is_empty()) {
        return Err(ApiFailure::bad_request("invalid_input", "secret names must not be empty"));
    }
    let names: Vec<String> = patch.keys().cloned().collect();
    hosted
        .conversation
        .update_secrets(patch.into_iter().map(|(k, v)| (k, SecretSource::from(v))).collect());
    Ok(Json(json!({ "updated": names })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecuteRequest {
    command: String,
    #[serde(default)]
    timeout_ms: Option<u64>,
    #[serde(default)]
    env: BTreeMap<String, String>,
    #[serde(default)]
    conversation_id: Option<String>,
}

fn workspace_failure(path: &str, e: WorkspaceError) -> ApiFailure {
    match e {
        WorkspaceError::PathEscape(_) => ApiFailure::bad_request("path_escape", format!("path escapes the workspace: {path}")),
        WorkspaceError::NotFound(_) => ApiFailure::not_found(format!("no such file: {path}")),
        WorkspaceError::Spawn(m) => ApiFailure::internal(m),
        other => ApiFailure::internal(other.to_string()),
    }
}

pub async fn execute(State(host): State<Shared>, body: Bytes) -> Result<Response, ApiFailure> {
    let request: ExecuteRequest = parse_body(&body)?;
    blocking(move || {
        let workspace = host.workspace_for(request.conversation_id.as_deref())?;
        let timeout = request.timeout_ms.map(Duration::from_millis);
        match workspace.execute_command(&request.command, timeout, &request.env) {
            Ok(output) => Ok(Json(output).into_response()),
            Err(WorkspaceError::Timeout { after_ms, stdout, stderr }) => Ok((
                StatusCode::REQUEST_TIMEOUT,
                Json(json!({
                    "error": "timeout",
                    "message": "command timed out",
                    "after_ms": after_ms,
                    "stdout": stdout,
                    "stderr": stderr,
                })),
            )
                .into_response()),
            Err(e) => Err(workspace_failure(&request.command, e)),
        }
    })
    .await
}

#[derive(Deserialize)]
pub struct FileQuery {
    path: String,
    #[serde(default)]
    conversation_id: Option<String>,
}

pub async fn upload_file(
    State(host): State<Shared>,
    Query(query): Query<FileQuery>,
    body: Bytes,
) -> Result<Json<Value>, ApiFailure> {
    blocking(move || {
        let workspace = host.workspace_for(query.conversation_id.as_deref())?;
        workspace.file_upload(&query.path, &body).map_err(|e| workspace_failure(&query.path, e))?;
        Ok(Json(json!({ "path": query.path, "bytes": body.len() })))
    })
    .await
}

pub async fn download_file(State(host): State<Shared>, Query(query): Query<FileQuery>) -> Result<Response, ApiFailure> {
    blocking(move || {
        let workspace = host.workspace_for(query.conversation_id.as_deref())?;
        let bytes = workspace.file_download(&query.path).map_err(|e| workspace_failure(&query.path, e))?;
        Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
    })
    .await
}
