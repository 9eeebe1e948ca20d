//! Conversation state: the one mutable object in the runtime.
//!
//! State changes take one of two paths. Event appends add a single file under
//! `events/`; metadata changes rewrite `base_state.json` and append a
//! [`ConversationStateUpdateEvent`] so observers of the event stream see the
//! transition. All access goes through a [`StateHandle`], which serializes
//! mutations with a FIFO lock and notifies subscribers in append order after
//! the lock is released.

mod lock;
mod persistence;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, TryLockError};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::events::{ConversationStateUpdateEvent, Event, EventPayload, EventSource};
use crate::security::{first_unmatched_action, ConfirmationPolicy};

pub use lock::{FifoGuard, FifoLock};
pub use persistence::{PersistenceDir, BASE_STATE_FILE, EVENTS_DIR};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("state lock poisoned by an aborted mutation")]
    LockPoisoned,
    #[error("persistence failure: {0}")]
    PersistenceFailure(String),
    #[error("corrupt base state: {0}")]
    CorruptState(String),
    #[error("corrupt event file {file}: {reason}")]
    CorruptEvent { file: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    #[default]
    Idle,
    Running,
    Paused,
    WaitingForConfirmation,
    Finished,
    Stuck,
    Error,
}

impl AgentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentStatus::Idle => "idle",
            AgentStatus::Running => "running",
            AgentStatus::Paused => "paused",
            AgentStatus::WaitingForConfirmation => "waiting_for_confirmation",
            AgentStatus::Finished => "finished",
            AgentStatus::Stuck => "stuck",
            AgentStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ConversationStats {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Accumulated cost in USD.
    pub total_cost: f64,
    pub llm_calls: u64,
}

/// A metadata write. Each variant maps to one field of the base-state file.
#[derive(Debug, Clone, PartialEq)]
pub enum MetadataUpdate {
    AgentStatus(AgentStatus),
    Stats(ConversationStats),
    ConfirmationPolicy(ConfirmationPolicy),
    Title(String),
}

impl MetadataUpdate {
    pub fn field(&self) -> &'static str {
        match self {
            MetadataUpdate::AgentStatus(_) => "agent_status",
            MetadataUpdate::Stats(_) => "stats",
            MetadataUpdate::ConfirmationPolicy(_) => "confirmation_policy",
            MetadataUpdate::Title(_) => "title",
        }
    }

    fn value(&self) -> Value {
        match self {
            MetadataUpdate::AgentStatus(s) => serde_json::to_value(s),
            MetadataUpdate::Stats(s) => serde_json::to_value(s),
            MetadataUpdate::ConfirmationPolicy(p) => serde_json::to_value(p),
            MetadataUpdate::Title(t) => serde_json::to_value(t),
        }
        .expect("metadata serializes")
    }
}

/// Serialized form of the metadata half of the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseState {
    pub conversation_id: String,
    pub agent_status: AgentStatus,
    pub stats: ConversationStats,
    pub confirmation_policy: ConfirmationPolicy,
    #[serde(default)]
    pub title: Option<String>,
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn as_slice(&self) -> &[Event] {
        &self.events
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Event> {
        self.events.get(index)
    }
}

#[derive(Debug)]
pub struct ConversationState {
    base: BaseState,
    events: EventLog,
    persistence: Option<PersistenceDir>,
    persisted_events: usize,
    base_dirty: bool,
    resume_pending_action: bool,
    approved_action: Option<String>,
    outbox: Vec<(usize, Event)>,
}

impl ConversationState {
    /// Creates an empty state; with a directory, persistence is enabled and
    /// the directory layout is created.
    pub fn new(conversation_id: impl Into<String>, persistence_dir: Option<&Path>) -> Result<Self, StateError> {
        let persistence = persistence_dir.map(PersistenceDir::create).transpose()?;
        Ok(ConversationState {
            base: BaseState {
                conversation_id: conversation_id.into(),
                agent_status: AgentStatus::Idle,
                stats: ConversationStats::default(),
                confirmation_policy: ConfirmationPolicy::default(),
                title: None,
            },
            events: EventLog::default(),
            persistence,
            persisted_events: 0,
            base_dirty: true,
            resume_pending_action: false,
            approved_action: None,
            outbox: Vec::new(),
        })
    }

    /// Loads `base_state.json` and replays the event files in name order.
    ///
    /// A conversation interrupted while `running` comes back `idle`. If the
    /// last action has no answer (and is not awaiting confirmation), the
    /// state is flagged so the agent re-executes it on the next step.
    pub fn resume(dir: &Path) -> Result<Self, StateError> {
        let persistence = PersistenceDir::open(dir);
        let base_text = persistence.read_base_state()?;
        let mut base: BaseState =
            serde_json::from_str(&base_text).map_err(|e| StateError::CorruptState(e.to_string()))?;
        let events = persistence.read_events()?;
        let dangling = first_unmatched_action(&events).is_some();
        let mut resume_pending_action = false;
        if base.agent_status == AgentStatus::Running {
            base.agent_status = AgentStatus::Idle;
        }
        if dangling && base.agent_status != AgentStatus::WaitingForConfirmation {
            base.agent_status = AgentStatus::Idle;
            resume_pending_action = true;
        }
        let persisted_events = events.len();
        Ok(ConversationState {
            base,
            events: EventLog { events },
            persistence: Some(persistence),
            persisted_events,
            base_dirty: true,
            resume_pending_action,
            approved_action: None,
            outbox: Vec::new(),
        })
    }

    pub fn conversation_id(&self) -> &str {
        &self.base.conversation_id
    }

    pub fn agent_status(&self) -> AgentStatus {
        self.base.agent_status
    }

    pub fn stats(&self) -> ConversationStats {
        self.base.stats
    }

    pub fn confirmation_policy(&self) -> ConfirmationPolicy {
        self.base.confirmation_policy
    }

    pub fn title(&self) -> Option<&str> {
        self.base.title.as_deref()
    }

    pub fn base(&self) -> &BaseState {
        &self.base
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn persistence_dir(&self) -> Option<&Path> {
        self.persistence.as_ref().map(PersistenceDir::root)
    }

    pub fn resume_pending_action(&self) -> bool {
        self.resume_pending_action
    }

    pub fn take_resume_pending_action(&mut self) -> bool {
        std::mem::take(&mut self.resume_pending_action)
    }

    /// Records a user approval for the pending call `tool_call_id`. Not
    /// persisted: an approved action interrupted before it ran is picked up
    /// by the resume path instead.
    pub fn approve_action(&mut self, tool_call_id: impl Into<String>) {
        self.approved_action = Some(tool_call_id.into());
    }

    /// Consumes the approval if it is for `tool_call_id`.
    pub fn take_approval(&mut self, tool_call_id: &str) -> bool {
        if self.approved_action.as_deref() == Some(tool_call_id) {
            self.approved_action = None;
            true
        } else {
            false
        }
    }

    /// Appends an event and returns its index. With persistence enabled the
    /// event file is written first; on failure the log is left unchanged.
    pub fn append_event(&mut self, event: Event) -> Result<usize, StateError> {
        let index = self.events.len();
        if let Some(dir) = &self.persistence {
            if self.persisted_events == index {
                dir.write_event(index, &event)?;
                self.persisted_events += 1;
            }
        }
        self.events.events.push(event.clone());
        self.outbox.push((index, event));
        Ok(index)
    }

    /// Updates one metadata field, rewrites the base-state file and appends
    /// the matching state-update event.
    pub fn update_metadata(&mut self, update: MetadataUpdate) -> Result<(), StateError> {
        let mut next = self.base.clone();
        match &update {
            MetadataUpdate::AgentStatus(s) => next.agent_status = *s,
            MetadataUpdate::Stats(s) => next.stats = *s,
            MetadataUpdate::ConfirmationPolicy(p) => next.confirmation_policy = *p,
            MetadataUpdate::Title(t) => next.title = Some(t.clone()),
        }
        if let Some(dir) = &self.persistence {
            dir.write_base_state(&serde_json::to_string_pretty(&next).expect("base state serializes"))?;
        }
        self.base = next;
        self.base_dirty = self.persistence.is_none();
        self.append_event(Event::new(
            EventSource::System,
            EventPayload::StateUpdate(ConversationStateUpdateEvent {
                field: update.field().to_string(),
                value: update.value(),
            }),
        ))?;
        Ok(())
    }

    /// Makes the base state and any unwritten events durable. A second call
    /// with nothing new writes nothing.
    pub fn persist_snapshot(&mut self) -> Result<(), StateError> {
        let Some(dir) = &self.persistence else {
            return Err(StateError::PersistenceFailure("no persistence directory configured".into()));
        };
        if self.base_dirty || !dir.base_state_path().exists() {
            dir.write_base_state(&serde_json::to_string_pretty(&self.base).expect("base state serializes"))?;
            self.base_dirty = false;
        }
        while self.persisted_events < self.events.len() {
            let index = self.persisted_events;
            dir.write_event(index, &self.events.events[index])?;
            self.persisted_events += 1;
        }
        Ok(())
    }
}

type Callback = Arc<dyn Fn(usize, &Event) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubscriptionId(u64);

#[derive(Default)]
struct Dispatcher {
    queue: Mutex<VecDeque<(usize, Event)>>,
    delivering: Mutex<()>,
    subscribers: Mutex<Vec<(SubscriptionId, Callback)>>,
    next_id: AtomicU64,
}

impl Dispatcher {
    /// Delivers queued events. Whoever holds `delivering` drains the queue;
    /// other threads (including re-entrant calls from callbacks) return
    /// immediately and leave their events to the current deliverer.
    fn drain(&self) {
        loop {
            let guard = match self.delivering.try_lock() {
                Ok(g) => g,
                Err(TryLockError::Poisoned(p)) => p.into_inner(),
                Err(TryLockError::WouldBlock) => return,
            };
            loop {
                let next = self.queue.lock().unwrap_or_else(|p| p.into_inner()).pop_front();
                let Some((index, event)) = next else { break };
                let subscribers: Vec<Callback> = self
                    .subscribers
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .iter()
                    .map(|(_, cb)| Arc::clone(cb))
                    .collect();
                for callback in subscribers {
                    callback(index, &event);
                }
            }
            drop(guard);
            if self.queue.lock().unwrap_or_else(|p| p.into_inner()).is_empty() {
                return;
            }
        }
    }
}

struct Shared {
    state: FifoLock<ConversationState>,
    dispatcher: Dispatcher,
}

/// Shareable handle to a [`ConversationState`].
#[derive(Clone)]
pub struct StateHandle {
    shared: Arc<Shared>,
}

impl StateHandle {
    pub fn new(state: ConversationState) -> Self {
        StateHandle {
            shared: Arc::new(Shared {
                state: FifoLock::new(state),
                dispatcher: Dispatcher::default(),
            }),
        }
    }

    /// Runs `mutation` under the state lock, then notifies subscribers of any
    /// events it appended.
    pub fn with_state_lock<R>(&self, mutation: impl FnOnce(&mut ConversationState) -> R) -> Result<R, StateError> {
        let mut guard = self.shared.state.lock()?;
        let result = mutation(&mut guard);
        if !guard.outbox.is_empty() {
            let appended = std::mem::take(&mut guard.outbox);
            self.shared
                .dispatcher
                .queue
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .extend(appended);
        }
        drop(guard);
        self.shared.dispatcher.drain();
        Ok(result)
    }

    pub fn append_event(&self, event: Event) -> Result<usize, StateError> {
        self.with_state_lock(|s| s.append_event(event))?
    }

    pub fn update_metadata(&self, update: MetadataUpdate) -> Result<(), StateError> {
        self.with_state_lock(|s| s.update_metadata(update))?
    }

    pub fn persist_snapshot(&self) -> Result<(), StateError> {
        self.with_state_lock(ConversationState::persist_snapshot)?
    }

    pub fn agent_status(&self) -> Result<AgentStatus, StateError> {
        self.with_state_lock(|s| s.agent_status())
    }

    pub fn events_snapshot(&self) -> Result<Vec<Event>, StateError> {
        self.with_state_lock(|s| s.events().as_slice().to_vec())
    }

    pub fn base_snapshot(&self) -> Result<BaseState, StateError> {
        self.with_state_lock(|s| s.base().clone())
    }

    pub fn event_count(&self) -> Result<usize, StateError> {
        self.with_state_lock(|s| s.events().len())
    }

    pub fn persistence_dir(&self) -> Result<Option<PathBuf>, StateError> {
        self.with_state_lock(|s| s.persistence_dir().map(Path::to_path_buf))
    }

    /// Registers a callback receiving `(index, event)` for every event
    /// appended after this call, in append order.
    pub fn subscribe(&self, callback: impl Fn(usize, &Event) + Send + Sync + 'static) -> SubscriptionId {
        let dispatcher = &self.shared.dispatcher;
        let id = SubscriptionId(dispatcher.next_id.fetch_add(1, Ordering::Relaxed));
        dispatcher
            .subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push((id, Arc::new(callback)));
        id
    }

    /// Atomically snapshots events from `since` onward and subscribes to
    /// later appends. An event may be seen both in the backlog and by the
    /// callback; consumers de-duplicate by index.
    pub fn subscribe_from(
        &self,
        since: usize,
        callback: impl Fn(usize, &Event) + Send + Sync + 'static,
    ) -> Result<(Vec<(usize, Event)>, SubscriptionId), StateError> {
        self.with_state_lock(|s| {
            let backlog = s
                .events()
                .iter()
                .enumerate()
                .skip(since)
                .map(|(i, e)| (i, e.clone()))
                .collect();
            (backlog, self.subscribe(callback))
        })
    }

    pub fn unsubscribe(&self, id: SubscriptionId) {
        self.shared
            .dispatcher
            .subscribers
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .retain(|(sid, _)| *sid != id);
    }
}
