#![allow(dead_code)]

use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use agentrt::llm::{ChatBackend, ScriptedBackend};
use agentrt::workspace::{ApiClient, RemoteWorkspace};
use agentrt::{LlmRegistry, ToolRegistry};
use agentrt_server::{AgentServer, BackgroundServer, ServerConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::WebSocket;

pub const KEY: &str = "test-session-key";

pub struct TestServer {
    pub server: BackgroundServer,
    pub dir: tempfile::TempDir,
    pub llms: LlmRegistry,
}

impl TestServer {
    pub fn start() -> Self {
        Self::start_with(|c| c)
    }

    pub fn start_with(adjust: impl FnOnce(ServerConfig) -> ServerConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::start_in(dir, adjust)
    }

    pub fn start_in(dir: tempfile::TempDir, adjust: impl FnOnce(ServerConfig) -> ServerConfig) -> Self {
        Self::start_with_llms(dir, LlmRegistry::new(), adjust)
    }

    /// Backends bind when a conversation is built, so ones reopened at
    /// startup need theirs registered beforehand.
    pub fn start_with_llms(
        dir: tempfile::TempDir,
        llms: LlmRegistry,
        adjust: impl FnOnce(ServerConfig) -> ServerConfig,
    ) -> Self {
        let config = adjust(ServerConfig::new(KEY, dir.path()).with_listen("127.0.0.1:0".parse().unwrap()));
        let server = AgentServer::with_registries(config, llms.clone(), ToolRegistry::with_builtins()).unwrap();
        let server = BackgroundServer::start(server).unwrap();
        TestServer { server, dir, llms }
    }

    /// Stops the server, keeping its directory for a restart.
    pub fn stop(self) -> tempfile::TempDir {
        let TestServer { server, dir, .. } = self;
        server.stop();
        dir
    }

    pub fn backend(&self, model: &str, backend: ScriptedBackend) -> Arc<ScriptedBackend> {
        let backend = Arc::new(backend);
        self.llms.register_backend(model, backend.clone() as Arc<dyn ChatBackend>);
        backend
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn client(&self) -> ApiClient {
        ApiClient::new(&self.url(), Some(KEY))
    }

    pub fn client_with_key(&self, key: Option<&str>) -> ApiClient {
        ApiClient::new(&self.url(), key)
    }

    pub fn workspace(&self) -> RemoteWorkspace {
        RemoteWorkspace::new(&self.url(), Some(KEY), "/workspace")
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn conversation_dir(&self, id: &str) -> PathBuf {
        self.root().join("conversations").join(id)
    }

    pub fn connect_ws(&self, id: &str, since: usize) -> WebSocket<MaybeTlsStream<TcpStream>> {
        let url = self.client().ws_url(&format!("/conversations/{id}/events"), &[("since", &since.to_string())]);
        let (socket, _) = tungstenite::connect(url.as_str()).unwrap();
        socket
    }
}

/// Every file under `dir`, recursively, as bytes.
pub fn all_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(bytes) = std::fs::read(&path) {
                out.push((path, bytes));
            }
        }
    }
    out.sort();
    out
}

/// Event files of a persisted conversation in append order.
pub fn event_files(state_dir: &Path) -> Vec<String> {
    all_files(&state_dir.join("events"))
        .into_iter()
        .map(|(_, bytes)| String::from_utf8(bytes).unwrap())
        .collect()
}

pub fn contains(haystack: &[u8], needle: &str) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle.as_bytes())
}

pub fn wait_until(timeout: Duration, mut done: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if done() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    done()
}
