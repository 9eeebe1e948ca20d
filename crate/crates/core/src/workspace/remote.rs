use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{CommandOutput, WorkspaceError};
use crate::llm::SecretString;

/// Upper bound on a downloaded file.
const MAX_DOWNLOAD_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl ApiError {
    /// The `error` code of a JSON error body, if any.
    pub fn code(&self) -> Option<String> {
        match self {
            ApiError::Status { body, .. } => serde_json::from_str::<Value>(body)
                .ok()
                .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_string)),
            _ => None,
        }
    }
}

/// Minimal blocking client for the agent server's REST surface.
#[derive(Clone)]
pub struct ApiClient {
    base: String,
    api_key: Option<SecretString>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ApiClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApiClient").field("base", &self.base).finish_non_exhaustive()
    }
}

impl ApiClient {
    pub fn new(host: &str, api_key: Option<&str>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(10)).build();
        ApiClient {
            base: host.trim_end_matches('/').to_string(),
            api_key: api_key.map(SecretString::new),
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn api_key(&self) -> Option<&str> {
        self.api_key.as_ref().map(SecretString::expose)
    }

    pub fn url(&self, path: &str, query: &[(&str, &str)]) -> String {
        let mut url = format!("{}{}", self.base, path);
        if !query.is_empty() {
            let encoded: String = url::form_urlencoded::Serializer::new(String::new()).extend_pairs(query).finish();
            url.push('?');
            url.push_str(&encoded);
        }
        url
    }

    fn request(&self, method: &str, url: &str) -> ureq::Request {
        let request = self.agent.request(method, url);
        match &self.api_key {
            Some(key) => request.set("Authorization", &format!("Bearer {}", key.expose())),
            None => request,
        }
    }

    fn finish(result: Result<ureq::Response, ureq::Error>) -> Result<ureq::Response, ApiError> {
        match result {
            Ok(response) => Ok(response),
            Err(ureq::Error::Status(status, response)) => {
                let body = response.into_string().unwrap_or_default();
                Err(ApiError::Status { status, body })
            }
            Err(ureq::Error::Transport(t)) => Err(ApiError::Unreachable(t.to_string())),
        }
    }

    fn json_body(response: ureq::Response) -> Result<Value, ApiError> {
        if response.status() == 204 {
            return Ok(Value::Null);
        }
        let text = response.into_string().map_err(|e| ApiError::Decode(e.to_string()))?;
        if text.is_empty() {
            return Ok(Value::Null);
        }
        serde_json::from_str(&text).map_err(|e| ApiError::Decode(e.to_string()))
    }

    /// Sends a JSON request (or none for `body = None`) and decodes the JSON
    /// reply; an empty reply decodes as `null`.
    pub fn send_json(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Value, ApiError> {
        let url = self.url(path, &[]);
        let request = self.request(method, &url);
        let result = match body {
            Some(body) => request.send_json(body.clone()),
            None => request.call(),
        };
        Self::json_body(Self::finish(result)?)
    }

    pub fn get_json(&self, path: &str) -> Result<Value, ApiError> {
        self.send_json("GET", path, None)
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, ApiError> {
        self.send_json("POST", path, Some(body))
    }

    pub fn put_bytes(&self, path: &str, query: &[(&str, &str)], body: &[u8]) -> Result<(), ApiError> {
        let url = self.url(path, query);
        let request = self.request("PUT", &url).set("Content-Type", "application/octet-stream");
        Self::finish(request.send_bytes(body)).map(|_| ())
    }

    pub fn get_bytes(&self, path: &str, query: &[(&str, &str)]) -> Result<Vec<u8>, ApiError> {
        let url = self.url(path, query);
        let response = Self::finish(self.request("GET", &url).call())?;
        let mut bytes = Vec::new();
        response
            .into_reader()
            .take(MAX_DOWNLOAD_BYTES)
            .read_to_end(&mut bytes)
            .map_err(|e| ApiError::Decode(e.to_string()))?;
        Ok(bytes)
    }

    /// WebSocket URL for a server path, with the key as a query parameter.
    pub fn ws_url(&self, path: &str, query: &[(&str, &str)]) -> String {
        let mut pairs: Vec<(&str, &str)> = query.to_vec();
        if let Some(key) = self.api_key() {
            pairs.push(("api_key", key));
        }
        let http = self.url(path, &pairs);
        if let Some(rest) = http.strip_prefix("https://") {
            format!("wss://{rest}")
        } else if let Some(rest) = http.strip_prefix("http://") {
            format!("ws://{rest}")
        } else {
            http
        }
    }
}

#[derive(Debug, Default)]
struct Binding {
    conversation_id: Option<String>,
    owned: bool,
}

/// A workspace living on an agent server. File and command operations are
/// scoped to the bound conversation's directory on the server.
#[derive(Debug, Clone)]
pub struct RemoteWorkspace {
    client: ApiClient,
    working_dir: PathBuf,
    binding: Arc<Mutex<Binding>>,
}

fn map_api(err: ApiError) -> WorkspaceError {
    match err {
        ApiError::Unreachable(m) | ApiError::Decode(m) => WorkspaceError::Transport(m),
        ApiError::Status { status, body } => WorkspaceError::Server { status, body },
    }
}

fn error_field(body: &str, field: &str) -> Option<String> {
    serde_json::from_str::<Value>(body).ok()?.get(field)?.as_str().map(str::to_string)
}

impl RemoteWorkspace {
    pub fn new(host: &str, api_key: Option<&str>, working_dir: impl Into<PathBuf>) -> Self {
        RemoteWorkspace {
            client: ApiClient::new(host, api_key),
            working_dir: working_dir.into(),
            binding: Arc::default(),
        }
    }

    pub fn client(&self) -> &ApiClient {
        &self.client
    }

    pub fn host(&self) -> &str {
        self.client.base()
    }

    /// Directory as requested by the client; the server picks the real one.
    pub fn working_dir(&self) -> &Path {
        &self.working_dir
    }

    /// Binds the workspace to a server-side conversation. `owned` marks that
    /// this handle created it and must delete it on close.
    pub fn bind_conversation(&self, id: impl Into<String>, owned: bool) {
        let mut binding = self.binding.lock().unwrap_or_else(|p| p.into_inner());
        binding.conversation_id = Some(id.into());
        binding.owned = owned;
    }

    pub fn conversation_id(&self) -> Option<String> {
        self.binding.lock().unwrap_or_else(|p| p.into_inner()).conversation_id.clone()
    }

    fn scope(&self) -> Vec<(&'static str, String)> {
        self.conversation_id().map(|id| vec![("conversation_id", id)]).unwrap_or_default()
    }

    pub fn execute_command(
        &self,
        command: &str,
        timeout: Option<Duration>,
        env: &BTreeMap<String, String>,
    ) -> Result<CommandOutput, WorkspaceError> {
        let mut body = json!({ "command": command });
        if let Some(t) = timeout {
            body["timeout_ms"] = json!(t.as_millis() as u64);
        }
        if !env.is_empty() {
            body["env"] = json!(env);
        }
        if let Some(id) = self.conversation_id() {
            body["conversation_id"] = json!(id);
        }
        match self.client.post_json("/execute", &body) {
            Ok(value) => serde_json::from_value(value).map_err(|e| WorkspaceError::Transport(e.to_string())),
            Err(ApiError::Status { status: 408, body }) => {
                let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                Err(WorkspaceError::Timeout {
                    after_ms: parsed.get("after_ms").and_then(Value::as_u64).unwrap_or(0),
                    stdout: parsed.get("stdout").and_then(Value::as_str).unwrap_or("").to_string(),
                    stderr: parsed.get("stderr").and_then(Value::as_str).unwrap_or("").to_string(),
                })
            }
            Err(e) => Err(map_api(e)),
        }
    }

    fn file_error(path: &str, err: ApiError) -> WorkspaceError {
        match &err {
            ApiError::Status { status: 404, .. } => WorkspaceError::NotFound(path.to_string()),
            ApiError::Status { status: 400, body } if error_field(body, "error").as_deref() == Some("path_escape") => {
                WorkspaceError::PathEscape(path.to_string())
            }
            _ => map_api(err),
        }
    }

    pub fn file_upload(&self, path: &str, content: &[u8]) -> Result<(), WorkspaceError> {
        let scope = self.scope();
        let mut query: Vec<(&str, &str)> = vec![("path", path)];
        query.extend(scope.iter().map(|(k, v)| (*k, v.as_str())));
        self.client.put_bytes("/files", &query, content).map_err(|e| Self::file_error(path, e))
    }

    pub fn file_download(&self, path: &str) -> Result<Vec<u8>, WorkspaceError> {
        let scope = self.scope();
        let mut query: Vec<(&str, &str)> = vec![("path", path)];
        query.extend(scope.iter().map(|(k, v)| (*k, v.as_str())));
        self.client.get_bytes("/files", &query).map_err(|e| Self::file_error(path, e))
    }

    pub fn close(&self) -> Result<(), WorkspaceError> {
        let (id, owned) = {
            let mut binding = self.binding.lock().unwrap_or_else(|p| p.into_inner());
            let owned = std::mem::take(&mut binding.owned);
            (binding.conversation_id.clone(), owned)
        };
        match (id, owned) {
            (Some(id), true) => match self.client.send_json("DELETE", &format!("/conversations/{id}"), None) {
                Ok(_) | Err(ApiError::Status { status: 404, .. }) => Ok(()),
                Err(e) => Err(map_api(e)),
            },
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_are_encoded() {
        let c = ApiClient::new("http://h:1/", Some("k y"));
        assert_eq!(c.url("/files", &[("path", "a b/c&d")]), "http://h:1/files?path=a+b%2Fc%26d");
        assert_eq!(c.ws_url("/x", &[("since", "3")]), "ws://h:1/x?since=3&api_key=k+y");
    }

    #[test]
    fn unreachable_host_is_transport_error() {
        let ws = RemoteWorkspace::new("http://127.0.0.1:9", None, "w");
        assert!(matches!(
            ws.execute_command("true", None, &BTreeMap::new()),
            Err(WorkspaceError::Transport(_))
        ));
    }

    #[test]
    fn debug_hides_key() {
        let c = ApiClient::new("http://h", Some("secret-key-1"));
        assert!(!format!("{c:?}").contains("secret-key-1"));
    }
}
