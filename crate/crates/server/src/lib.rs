//! Agent server: hosts conversations behind a REST API and streams their
//! events over WebSockets.
//!
//! [`AgentServer`] builds the router; [`BackgroundServer`] runs it on its own
//! thread, which is what the CLI and tests use.

mod config;
mod error;
mod host;
mod routes;
mod stream;

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post, put};
use axum::Router;
use tokio::sync::oneshot;

use agentrt::{LlmRegistry, ToolRegistry};

pub use config::{ConfigError, ServerConfig};
pub use error::ApiFailure;
pub use stream::{frame_text, CLOSE_TOO_SLOW, CLOSE_UNKNOWN_CONVERSATION};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct AgentServer {
    host: Arc<host::Host>,
}

impl AgentServer {
    /// A server with the built-in tools and the HTTP model client.
    pub fn new(config: ServerConfig) -> Result<Self, ServerError> {
        Self::with_registries(config, LlmRegistry::default(), ToolRegistry::with_builtins())
    }

    /// Reopens any conversations already under the workspace root.
    pub fn with_registries(config: ServerConfig, llms: LlmRegistry, tools: ToolRegistry) -> Result<Self, ServerError> {
        config.validate()?;
        Ok(AgentServer { host: Arc::new(host::Host::new(config, llms, tools)?) })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.host.config
    }

    pub fn router(&self) -> Router {
        let state = self.host.clone();
        Router::new()
            .route("/health", get(routes::health))
            .route("/conversations", post(routes::create_conversation).get(routes::list_conversations))
            .route("/conversations/{id}", get(routes::get_conversation).delete(routes::delete_conversation))
            .route("/conversations/{id}/events", get(routes::events))
            .route("/conversations/{id}/messages", post(routes::send_message))
            .route("/conversations/{id}/run", post(routes::run))
            .route("/conversations/{id}/pause", post(routes::pause))
            .route("/conversations/{id}/confirmation", post(routes::confirmation))
            .route("/conversations/{id}/confirmation_policy", put(routes::set_policy))
            .route("/conversations/{id}/secrets", axum::routing::patch(routes::update_secrets))
            .route("/execute", post(routes::execute))
            .route("/files", put(routes::upload_file).get(routes::download_file))
            .layer(axum::middleware::from_fn_with_state(state.clone(), routes::require_key))
            .layer(DefaultBodyLimit::max(self.host.config.max_body_bytes))
            .with_state(state)
    }

    /// Serves until the listener fails.
    pub async fn serve(self, listener: tokio::net::TcpListener) -> std::io::Result<()> {
        axum::serve(listener, self.router()).await
    }
}

/// A server running on a dedicated runtime thread. Dropping it stops the
/// listener.
pub struct BackgroundServer {
    addr: SocketAddr,
    api_key: String,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds `config.listen` (port 0 picks a free one) and starts serving.
    pub fn start(server: AgentServer) -> Result<Self, ServerError> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(server.config().listen))?;
        let addr = listener.local_addr()?;
        let api_key = server.config().api_key.clone().unwrap_or_default();
        let (tx, rx) = oneshot::channel();
        let thread = thread::Builder::new().name(format!("agent-server-{addr}")).spawn(move || {
            runtime.block_on(async move {
                tokio::select! {
                    result = server.serve(listener) => {
                        if let Err(e) = result {
                            log::error!("server stopped: {e}");
                        }
                    }
                    _ = rx => {}
                }
            });
            runtime.shutdown_background();
        })?;
        Ok(BackgroundServer { addr, api_key, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn api_key(&self) -> &str {
        &self.api_key
    }

    /// Stops serving and waits for the runtime thread.
    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}
