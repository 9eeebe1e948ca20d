use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::Message as WsMessage;

use super::{ConversationError, ConversationOptions};
use crate::agent::AgentConfig;
use crate::events::{ContentPart, Event, EventPayload};
use crate::security::{ConfirmationDecision, ConfirmationPolicy};
use crate::state::{AgentStatus, BaseState};
use crate::workspace::{ApiClient, ApiError, RemoteWorkspace};

/// Frame carried on the event stream.
#[derive(Debug, Deserialize)]
struct Frame {
    index: usize,
    event: Event,
}

/// Handle for a callback registered on a remote conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteSubscription(u64);

type Callback = Arc<dyn Fn(usize, &Event) + Send + Sync>;

/// Local copy of the server log, fed by the WebSocket stream.
#[derive(Default)]
struct Mirror {
    events: Mutex<Vec<Event>>,
    changed: Condvar,
    subscribers: Mutex<Vec<(u64, Callback)>>,
    next_subscriber: AtomicU64,
    stop: AtomicBool,
    gone: AtomicBool,
}

impl Mirror {
    fn accept(&self, frame: Frame) {
        {
            let mut events = self.events.lock().unwrap_or_else(|p| p.into_inner());
            if frame.index != events.len() {
                // Duplicates are dropped; gaps cannot occur within one
                // connection and are repaired by the reconnect cursor.
                return;
            }
            events.push(frame.event.clone());
        }
        let subscribers: Vec<Callback> = self
            .subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .iter()
            .map(|(_, cb)| cb.clone())
            .collect();
        for callback in subscribers {
            callback(frame.index, &frame.event);
        }
        self.changed.notify_all();
    }

    fn len(&self) -> usize {
        self.events.lock().unwrap_or_else(|p| p.into_inner()).len()
    }
}

const RECONNECT_DELAY: Duration = Duration::from_millis(100);
const READ_TIMEOUT: Duration = Duration::from_millis(200);

fn stream_events(client: ApiClient, id: String, mirror: Arc<Mirror>) {
    let path = format!("/conversations/{id}/events");
    while !mirror.stop.load(Ordering::SeqCst) {
        let since = mirror.len().to_string();
        let url = client.ws_url(&path, &[("since", since.as_str())]);
        let mut socket = match tungstenite::connect(url.as_str()) {
            Ok((socket, _)) => socket,
            Err(tungstenite::Error::Http(response)) if response.status().as_u16() == 404 => {
                mirror.gone.store(true, Ordering::SeqCst);
                mirror.changed.notify_all();
                return;
            }
            Err(e) => {
                log::debug!("event stream connect failed: {e}");
                thread::sleep(RECONNECT_DELAY);
                continue;
            }
        };
        if let MaybeTlsStream::Plain(tcp) = socket.get_ref() {
            let _ = tcp.set_read_timeout(Some(READ_TIMEOUT));
        }
        loop {
            if mirror.stop.load(Ordering::SeqCst) {
                let _ = socket.close(None);
                return;
            }
            match socket.read() {
                Ok(WsMessage::Text(text)) => match serde_json::from_str::<Frame>(text.as_str()) {
                    Ok(frame) => mirror.accept(frame),
                    Err(e) => log::warn!("undecodable event frame: {e}"),
                },
                Ok(WsMessage::Close(frame)) => {
                    if frame.is_some_and(|f| u16::from(f.code) == 4404) {
                        mirror.gone.store(true, Ordering::SeqCst);
                        mirror.changed.notify_all();
                        return;
                    }
                    break;
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => {
                    log::debug!("event stream dropped: {e}");
                    break;
                }
            }
        }
        thread::sleep(RECONNECT_DELAY);
    }
}

fn map_api(err: ApiError) -> ConversationError {
    let code = err.code();
    match err {
        ApiError::Unreachable(m) => ConversationError::ServerUnreachable(m),
        ApiError::Decode(m) => ConversationError::Server { status: 0, body: m },
        ApiError::Status { status, body } => match (status, code.as_deref()) {
            (409, Some("already_running")) => ConversationError::AlreadyRunning,
            (409, Some("no_pending_action")) => ConversationError::NoPendingAction,
            (404, _) => ConversationError::NotFound(body),
            (400, _) => ConversationError::InvalidConfig(body),
            _ => ConversationError::Server { status, body },
        },
    }
}

/// A conversation hosted by an agent server. The loop runs on the server;
/// events arrive over the WebSocket stream.
#[derive(Clone)]
pub struct RemoteConversation {
    id: String,
    workspace: RemoteWorkspace,
    mirror: Arc<Mirror>,
    _guard: Arc<StreamGuard>,
    run_timeout: Duration,
}

impl std::fmt::Debug for RemoteConversation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteConversation")
            .field("id", &self.id)
            .field("host", &self.workspace.host())
            .finish_non_exhaustive()
    }
}

impl RemoteConversation {
    /// Creates the conversation on the server from the serialized config.
    /// Model backends, tool registries and secret sources in `options` are
    /// process-local and stay behind; the server uses its own.
    pub fn create(config: AgentConfig, workspace: RemoteWorkspace, options: ConversationOptions) -> Result<Self, ConversationError> {
        let mut body = json!({ "agent": config });
        if let Some(policy) = options.confirmation_policy {
            body["confirmation_policy"] = serde_json::to_value(policy).expect("policy serializes");
        }
        if let Some(id) = &options.conversation_id {
            body["conversation_id"] = json!(id);
        }
        let reply = workspace.client().post_json("/conversations", &body).map_err(map_api)?;
        let id = reply
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| ConversationError::Server { status: 201, body: reply.to_string() })?
            .to_string();
        workspace.bind_conversation(id.clone(), true);
        Ok(Self::start(id, workspace))
    }

    /// Attaches to an existing server-side conversation without owning it.
    pub fn attach(id: impl Into<String>, workspace: RemoteWorkspace) -> Result<Self, ConversationError> {
        let id = id.into();
        workspace.client().get_json(&format!("/conversations/{id}")).map_err(map_api)?;
        workspace.bind_conversation(id.clone(), false);
        Ok(Self::start(id, workspace))
    }

    fn start(id: String, workspace: RemoteWorkspace) -> Self {
        let mirror = Arc::new(Mirror::default());
        let client = workspace.client().clone();
        let stream_mirror = mirror.clone();
        let stream_id = id.clone();
        thread::Builder::new()
            .name(format!("events-{id}"))
            .spawn(move || stream_events(client, stream_id, stream_mirror))
            .expect("spawn event stream thread");
        let guard = Arc::new(StreamGuard(mirror.clone()));
        RemoteConversation { id, workspace, mirror, _guard: guard, run_timeout: Duration::from_secs(3600) }
    }

    /// Upper bound on how long `run` and `confirm` wait for the loop.
    pub fn with_run_timeout(mut self, timeout: Duration) -> Self {
        self.run_timeout = timeout;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn workspace(&self) -> &RemoteWorkspace {
        &self.workspace
    }

    fn path(&self, suffix: &str) -> String {
        format!("/conversations/{}{suffix}", self.id)
    }

    fn client(&self) -> &ApiClient {
        self.workspace.client()
    }

    pub fn send_message(&self, text: impl Into<String>) -> Result<(), ConversationError> {
        self.send_content(vec![ContentPart::text(text)])
    }

    pub fn send_content(&self, content: Vec<ContentPart>) -> Result<(), ConversationError> {
        let body = json!({ "content": content });
        self.client().post_json(&self.path("/messages"), &body).map_err(map_api)?;
        Ok(())
    }

    fn since_of(reply: &Value) -> usize {
        reply.get("since").and_then(Value::as_u64).unwrap_or(0) as usize
    }

    /// Starts the server loop and waits for the status it ends with.
    pub fn run(&self) -> Result<AgentStatus, ConversationError> {
        let reply = self.client().send_json("POST", &self.path("/run"), None).map_err(map_api)?;
        self.wait_for_end(Self::since_of(&reply))
    }

    pub fn pause(&self) -> Result<(), ConversationError> {
        self.client().send_json("POST", &self.path("/pause"), None).map_err(map_api)?;
        Ok(())
    }

    pub fn confirm(&self, decision: ConfirmationDecision, note: Option<String>) -> Result<AgentStatus, ConversationError> {
        let mut body = json!({ "decision": decision });
        if let Some(note) = note {
            body["note"] = json!(note);
        }
        let reply = self.client().post_json(&self.path("/confirmation"), &body).map_err(map_api)?;
        self.wait_for_end(Self::since_of(&reply))
    }

    pub fn set_confirmation_policy(&self, policy: ConfirmationPolicy) -> Result<(), ConversationError> {
        let body = serde_json::to_value(policy).expect("policy serializes");
        self.client().send_json("PUT", &self.path("/confirmation_policy"), Some(&body)).map_err(map_api)?;
        Ok(())
    }

    pub fn update_secrets(&self, patch: &BTreeMap<String, String>) -> Result<(), ConversationError> {
        let body = serde_json::to_value(patch).expect("map serializes");
        self.client().send_json("PATCH", &self.path("/secrets"), Some(&body)).map_err(map_api)?;
        Ok(())
    }

    pub fn base(&self) -> Result<BaseState, ConversationError> {
        let record = self.client().get_json(&self.path("")).map_err(map_api)?;
        serde_json::from_value(record).map_err(|e| ConversationError::Server { status: 200, body: e.to_string() })
    }

    pub fn status(&self) -> Result<AgentStatus, ConversationError> {
        Ok(self.base()?.agent_status)
    }

    /// The full log as the server has it.
    pub fn events(&self) -> Result<Vec<Event>, ConversationError> {
        let url_path = self.path("/events");
        let frames = self.client().get_json(&url_path).map_err(map_api)?;
        let frames: Vec<Frame> =
            serde_json::from_value(frames).map_err(|e| ConversationError::Server { status: 200, body: e.to_string() })?;
        Ok(frames.into_iter().map(|f| f.event).collect())
    }

    /// Events received over the stream so far.
    pub fn streamed_events(&self) -> Vec<Event> {
        self.mirror.events.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn subscribe(&self, callback: impl Fn(usize, &Event) + Send + Sync + 'static) -> RemoteSubscription {
        let id = self.mirror.next_subscriber.fetch_add(1, Ordering::Relaxed);
        self.mirror
            .subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push((id, Arc::new(callback)));
        RemoteSubscription(id)
    }

    pub fn unsubscribe(&self, subscription: RemoteSubscription) {
        self.mirror
            .subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .retain(|(id, _)| *id != subscription.0);
    }

    /// Waits until the stream shows a non-running status at or after
    /// index `since`.
    fn wait_for_end(&self, since: usize) -> Result<AgentStatus, ConversationError> {
        let deadline = Instant::now() + self.run_timeout;
        let mut events = self.mirror.events.lock().unwrap_or_else(|p| p.into_inner());
        let mut scanned = since;
        loop {
            while scanned < events.len() {
                if let EventPayload::StateUpdate(update) = &events[scanned].payload {
                    if update.field == "agent_status" {
                        if let Ok(status) = serde_json::from_value::<AgentStatus>(update.value.clone()) {
                            if status != AgentStatus::Running {
                                return Ok(status);
                            }
                        }
                    }
                }
                scanned += 1;
            }
            if self.mirror.gone.load(Ordering::SeqCst) {
                return Err(ConversationError::NotFound(self.id.clone()));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ConversationError::Timeout);
            }
            let wait = (deadline - now).min(Duration::from_millis(250));
            events = self.mirror.changed.wait_timeout(events, wait).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    /// Stops the stream and deletes the server-side conversation if this
    /// handle created it.
    pub fn close(&self) -> Result<(), ConversationError> {
        self.mirror.stop.store(true, Ordering::SeqCst);
        self.workspace.close()?;
        Ok(())
    }
}

/// Stops the stream thread when the last handle clone goes away.
struct StreamGuard(Arc<Mirror>);

impl Drop for StreamGuard {
    fn drop(&mut self) {
        self.0.stop.store(true, Ordering::SeqCst);
    }
}
