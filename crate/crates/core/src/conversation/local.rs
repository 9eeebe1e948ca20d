use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;

use super::{ConversationError, ConversationOptions};
use crate::agent::{fallback_title, generate_title, Agent, AgentConfig, StepOutcome};
use crate::events::{ContentPart, Event, EventPayload, EventSource, MessageRole, UserRejectObservation};
use crate::secrets::{SecretRegistry, SecretSource};
use crate::security::{first_unmatched_action, ConfirmationDecision, ConfirmationPolicy};
use crate::state::{AgentStatus, BaseState, ConversationState, MetadataUpdate, StateHandle, SubscriptionId};
use crate::tools::{ChildReport, ChildSpawner, ToolContext, ToolRegistry};
use crate::workspace::Workspace;
use crate::llm::LlmRegistry;

const DELEGATE_TOOL: &str = "delegate";

struct Inner {
    id: String,
    agent: Agent,
    state: StateHandle,
    workspace: Workspace,
    secrets: SecretRegistry,
    running: AtomicBool,
    pause_requested: AtomicBool,
    inbox: Mutex<VecDeque<Event>>,
}

/// An in-process conversation running the agent loop on the caller's thread.
#[derive(Clone)]
pub struct LocalConversation {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for LocalConversation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalConversation").field("id", &self.inner.id).finish_non_exhaustive()
    }
}

/// Ownership of the run loop; dropping it ends the run.
struct RunGuard(LocalConversation);

impl Drop for RunGuard {
    fn drop(&mut self) {
        self.0.inner.running.store(false, Ordering::SeqCst);
        if let Err(e) = self.0.drain_inbox(false) {
            log::warn!("could not deliver queued messages: {e}");
        }
    }
}

impl LocalConversation {
    pub fn new(config: AgentConfig, workspace: Workspace, options: ConversationOptions) -> Result<Self, ConversationError> {
        let id = options.conversation_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let mut state = ConversationState::new(id.clone(), options.persistence_dir.as_deref())?;
        if let Some(policy) = options.confirmation_policy {
            state.update_metadata(MetadataUpdate::ConfirmationPolicy(policy))?;
        }
        Self::assemble(config, workspace, options, state)
    }

    /// Reopens a persisted conversation. The configuration is supplied again
    /// since it may carry credentials that are never written to disk.
    pub fn resume(
        config: AgentConfig,
        workspace: Workspace,
        dir: &Path,
        options: ConversationOptions,
    ) -> Result<Self, ConversationError> {
        let mut state = ConversationState::resume(dir)?;
        if state.take_resume_pending_action() {
            log::info!("conversation {} resumes with an unanswered tool call", state.conversation_id());
        }
        let options = ConversationOptions { persistence_dir: Some(dir.to_path_buf()), ..options };
        Self::assemble(config, workspace, options, state)
    }

    fn assemble(
        config: AgentConfig,
        workspace: Workspace,
        options: ConversationOptions,
        state: ConversationState,
    ) -> Result<Self, ConversationError> {
        let id = state.conversation_id().to_string();
        let llms = options.llms.clone().unwrap_or_default();
        let tools = options.tools.clone().unwrap_or_else(ToolRegistry::with_builtins);
        let secrets = options.secrets.clone().unwrap_or_default();
        let mut context = ToolContext::new(workspace.clone(), secrets.clone());
        let parent_state = Arc::new(OnceLock::new());
        if config.tool_specs.iter().any(|s| s.name == DELEGATE_TOOL) {
            let parent = ParentLink {
                id: id.clone(),
                children_dir: state.persistence_dir().map(|d| d.join("children")),
                state: parent_state.clone(),
            };
            context.spawner = Some(child_spawner(&config, &workspace, &llms, &tools, &secrets, parent));
        }
        let agent = Agent::new(config, &llms, &tools, &context).map_err(|e| ConversationError::InvalidConfig(e.to_string()))?;
        let state = StateHandle::new(state);
        let _ = parent_state.set(state.clone());
        Ok(LocalConversation {
            inner: Arc::new(Inner {
                id,
                agent,
                state,
                workspace,
                secrets,
                running: AtomicBool::new(false),
                pause_requested: AtomicBool::new(false),
                inbox: Mutex::new(VecDeque::new()),
            }),
        })
    }

    pub fn id(&self) -> &str {
        &self.inner.id
    }

    pub fn state(&self) -> &StateHandle {
        &self.inner.state
    }

    pub fn agent(&self) -> &Agent {
        &self.inner.agent
    }

    pub fn workspace(&self) -> &Workspace {
        &self.inner.workspace
    }

    pub fn secrets(&self) -> &SecretRegistry {
        &self.inner.secrets
    }

    pub fn is_running(&self) -> bool {
        self.inner.running.load(Ordering::SeqCst)
    }

    pub fn status(&self) -> Result<AgentStatus, ConversationError> {
        Ok(self.inner.state.agent_status()?)
    }

    pub fn base(&self) -> Result<BaseState, ConversationError> {
        Ok(self.inner.state.base_snapshot()?)
    }

    pub fn events(&self) -> Result<Vec<Event>, ConversationError> {
        Ok(self.inner.state.events_snapshot()?)
    }

    pub fn subscribe(&self, callback: impl Fn(usize, &Event) + Send + Sync + 'static) -> SubscriptionId {
        self.inner.state.subscribe(callback)
    }

    pub fn unsubscribe(&self, id: SubscriptionId) {
        self.inner.state.unsubscribe(id)
    }

    fn ensure_system_prompt(&self) -> Result<(), ConversationError> {
        let prompt = self.inner.agent.system_prompt();
        self.inner.state.with_state_lock(|s| {
            let present = s.events().iter().any(|e| matches!(e.payload, EventPayload::SystemPrompt(_)));
            if present {
                Ok(())
            } else {
                s.append_event(prompt).map(|_| ())
            }
        })??;
        Ok(())
    }

    pub fn send_message(&self, text: impl Into<String>) -> Result<(), ConversationError> {
        self.send_content(vec![ContentPart::text(text)])
    }

    /// Queues a user message. Outside a run it is appended at once; during a
    /// run it is delivered before the next model call.
    pub fn send_content(&self, content: Vec<ContentPart>) -> Result<(), ConversationError> {
        if content.is_empty() {
            return Err(ConversationError::InvalidInput("a message needs at least one content part".into()));
        }
        self.ensure_system_prompt()?;
        let event = self.inner.agent.user_message(content);
        self.inner.inbox.lock().unwrap_or_else(|p| p.into_inner()).push_back(event);
        if !self.is_running() {
            self.drain_inbox(false)?;
        }
        Ok(())
    }

    /// Appends queued messages unless a tool call is still open.
    fn drain_inbox(&self, in_run: bool) -> Result<(), ConversationError> {
        let mut inbox = self.inner.inbox.lock().unwrap_or_else(|p| p.into_inner());
        if inbox.is_empty() {
            return Ok(());
        }
        let mut first_message = None;
        self.inner.state.with_state_lock(|s| {
            if first_unmatched_action(s.events().as_slice()).is_some() {
                return Ok(());
            }
            let had_user_message = s
                .events()
                .iter()
                .any(|e| matches!(&e.payload, EventPayload::Message(m) if m.role == MessageRole::User));
            while let Some(event) = inbox.pop_front() {
                if !had_user_message && first_message.is_none() {
                    if let EventPayload::Message(m) = &event.payload {
                        first_message = Some(m.text());
                    }
                }
                s.append_event(event)?;
            }
            let reopen = matches!(s.agent_status(), AgentStatus::Finished | AgentStatus::Stuck | AgentStatus::Error);
            if !in_run && reopen {
                s.update_metadata(MetadataUpdate::AgentStatus(AgentStatus::Idle))?;
            }
            Ok::<_, crate::state::StateError>(())
        })??;
        drop(inbox);
        if let Some(text) = first_message {
            self.schedule_title(text)?;
        }
        Ok(())
    }

    fn schedule_title(&self, first_message: String) -> Result<(), ConversationError> {
        if self.inner.state.with_state_lock(|s| s.title().is_some())? {
            return Ok(());
        }
        let max_len = self.inner.agent.config().title_max_len;
        match self.inner.agent.title_llm() {
            None => {
                self.inner.state.update_metadata(MetadataUpdate::Title(fallback_title(&first_message, max_len)))?;
            }
            Some(llm) => {
                let state = self.inner.state.clone();
                thread::spawn(move || {
                    let title = generate_title(Some(llm.as_ref()), &first_message, max_len);
                    if let Err(e) = state.update_metadata(MetadataUpdate::Title(title)) {
                        log::warn!("could not store title: {e}");
                    }
                });
            }
        }
        Ok(())
    }

    /// Asks the loop to stop at the next step boundary. Takes effect on the
    /// next `run` when no run is active.
    pub fn pause(&self) {
        self.inner.pause_requested.store(true, Ordering::SeqCst);
    }

    fn do_pause(&self) -> Result<AgentStatus, ConversationError> {
        self.inner.state.with_state_lock(|s| {
            s.append_event(Event::new(EventSource::User, EventPayload::Pause))?;
            s.update_metadata(MetadataUpdate::AgentStatus(AgentStatus::Paused))?;
            if s.persistence_dir().is_some() {
                s.persist_snapshot()?;
            }
            Ok::<_, crate::state::StateError>(())
        })??;
        Ok(AgentStatus::Paused)
    }

    pub fn set_confirmation_policy(&self, policy: ConfirmationPolicy) -> Result<(), ConversationError> {
        Ok(self.inner.state.update_metadata(MetadataUpdate::ConfirmationPolicy(policy))?)
    }

    pub fn update_secrets(&self, patch: BTreeMap<String, SecretSource>) {
        self.inner.secrets.update_secrets(patch);
    }

    /// Records the user's decision on the pending tool call without running
    /// the loop.
    pub fn apply_confirmation(&self, decision: ConfirmationDecision, note: Option<String>) -> Result<(), ConversationError> {
        self.inner.state.with_state_lock(|s| {
            if s.agent_status() != AgentStatus::WaitingForConfirmation {
                return Err(ConversationError::NoPendingAction);
            }
            let events = s.events().as_slice();
            let Some(action) = first_unmatched_action(events).and_then(|i| events[i].as_action()) else {
                return Err(ConversationError::NoPendingAction);
            };
            let id = action.tool_call_id.clone();
            match decision {
                ConfirmationDecision::Approve => s.approve_action(id),
                ConfirmationDecision::Reject => {
                    let note = note.filter(|n| !n.is_empty());
                    s.append_event(Event::new(
                        EventSource::User,
                        EventPayload::UserReject(UserRejectObservation { tool_call_id: id, note }),
                    ))?;
                }
            }
            s.update_metadata(MetadataUpdate::AgentStatus(AgentStatus::Running))?;
            Ok(())
        })?
    }

    /// Applies the decision and continues the loop, returning where it
    /// stopped.
    pub fn confirm(&self, decision: ConfirmationDecision, note: Option<String>) -> Result<AgentStatus, ConversationError> {
        let guard = self.claim()?;
        self.apply_confirmation(decision, note)?;
        self.run_claimed(guard)
    }

    fn claim(&self) -> Result<RunGuard, ConversationError> {
        if self.inner.running.swap(true, Ordering::SeqCst) {
            return Err(ConversationError::AlreadyRunning);
        }
        Ok(RunGuard(self.clone()))
    }

    /// Steps the agent until it finishes, needs confirmation, fails, gets
    /// stuck, is paused or reaches `max_iterations` model calls.
    pub fn run(&self) -> Result<AgentStatus, ConversationError> {
        let guard = self.claim()?;
        self.run_claimed(guard)
    }

    /// Like [`run`](Self::run) but on a background thread. The loop is
    /// claimed before returning, so a concurrent caller gets
    /// `AlreadyRunning`. Returns the log length at the start of the run.
    pub fn spawn_run(&self) -> Result<(usize, thread::JoinHandle<AgentStatus>), ConversationError> {
        let guard = self.claim()?;
        self.spawn_claimed(guard)
    }

    /// [`confirm`](Self::confirm) with the loop on a background thread.
    pub fn spawn_confirm(
        &self,
        decision: ConfirmationDecision,
        note: Option<String>,
    ) -> Result<(usize, thread::JoinHandle<AgentStatus>), ConversationError> {
        let guard = self.claim()?;
        self.apply_confirmation(decision, note)?;
        self.spawn_claimed(guard)
    }

    fn spawn_claimed(&self, guard: RunGuard) -> Result<(usize, thread::JoinHandle<AgentStatus>), ConversationError> {
        let since = self.inner.state.event_count()?;
        let me = self.clone();
        let handle = thread::Builder::new()
            .name(format!("run-{}", self.inner.id))
            .spawn(move || match me.run_claimed(guard) {
                Ok(status) => status,
                Err(e) => {
                    // Nobody is waiting on the return value, so the stream
                    // has to show that the run ended.
                    log::error!("conversation {} failed: {e}", me.inner.id);
                    if let Err(e) = me.inner.state.update_metadata(MetadataUpdate::AgentStatus(AgentStatus::Error)) {
                        log::error!("could not record the failure: {e}");
                    }
                    AgentStatus::Error
                }
            })
            .map_err(|e| ConversationError::InvalidInput(format!("cannot start the run thread: {e}")))?;
        Ok((since, handle))
    }

    fn run_claimed(&self, _guard: RunGuard) -> Result<AgentStatus, ConversationError> {
        self.ensure_system_prompt()?;
        let state = &self.inner.state;
        let current = state.agent_status()?;
        if current == AgentStatus::WaitingForConfirmation {
            // Re-announce so remote callers see this run end.
            state.update_metadata(MetadataUpdate::AgentStatus(current))?;
            return Ok(current);
        }
        if self.inner.pause_requested.swap(false, Ordering::SeqCst) {
            return self.do_pause();
        }
        if current != AgentStatus::Running {
            state.update_metadata(MetadataUpdate::AgentStatus(AgentStatus::Running))?;
        }
        let agent = &self.inner.agent;
        let max = agent.config().max_iterations;
        let mut llm_calls = 0;
        let final_status = loop {
            if self.inner.pause_requested.swap(false, Ordering::SeqCst) {
                return self.do_pause();
            }
            self.drain_inbox(true)?;
            if llm_calls >= max && !self.has_pending_action()? {
                break AgentStatus::Idle;
            }
            let (outcome, called) = agent.step_counted(state)?;
            if called {
                llm_calls += 1;
            }
            match outcome {
                StepOutcome::Continued => continue,
                StepOutcome::AwaitingConfirmation => break AgentStatus::WaitingForConfirmation,
                StepOutcome::Finished => {
                    let idle = agent.config().await_user_after_reply && self.last_is_assistant_message()?;
                    break if idle { AgentStatus::Idle } else { AgentStatus::Finished };
                }
                StepOutcome::Errored => break AgentStatus::Error,
                StepOutcome::Stuck => break AgentStatus::Stuck,
            }
        };
        state.with_state_lock(|s| {
            if s.agent_status() != final_status {
                s.update_metadata(MetadataUpdate::AgentStatus(final_status))?;
            }
            if s.persistence_dir().is_some() {
                s.persist_snapshot()?;
            }
            Ok::<_, crate::state::StateError>(())
        })??;
        Ok(final_status)
    }

    fn has_pending_action(&self) -> Result<bool, ConversationError> {
        Ok(self.inner.state.with_state_lock(|s| first_unmatched_action(s.events().as_slice()).is_some())?)
    }

    fn last_is_assistant_message(&self) -> Result<bool, ConversationError> {
        Ok(self.inner.state.with_state_lock(|s| {
            s.events()
                .iter()
                .rev()
                .find(|e| e.payload.is_llm_convertible())
                .is_some_and(|e| matches!(&e.payload, EventPayload::Message(m) if m.role == MessageRole::Assistant))
        })?)
    }

    /// The last thing the agent said: its final assistant message or the
    /// summary passed to a terminal tool.
    pub fn final_message(&self) -> Result<Option<String>, ConversationError> {
        Ok(self.inner.state.with_state_lock(|s| {
            s.events().iter().rev().find_map(|e| match &e.payload {
                EventPayload::Message(m) if m.role == MessageRole::Assistant => Some(m.text()),
                EventPayload::Observation(o) if !o.is_error && o.tool_name == "finish" => Some(o.llm_text.clone()),
                _ => None,
            })
        })?)
    }
}

struct ParentLink {
    id: String,
    children_dir: Option<PathBuf>,
    state: Arc<OnceLock<StateHandle>>,
}

/// Children share the workspace and secrets, persist under the parent's
/// `children/` directory and inherit its confirmation policy at spawn time.
fn child_spawner(
    config: &AgentConfig,
    workspace: &Workspace,
    llms: &LlmRegistry,
    tools: &ToolRegistry,
    secrets: &SecretRegistry,
    parent: ParentLink,
) -> ChildSpawner {
    let mut child_config = config.clone();
    child_config.tool_specs.retain(|s| s.name != DELEGATE_TOOL);
    let workspace = workspace.clone();
    let llms = llms.clone();
    let tools = tools.clone();
    let secrets = secrets.clone();
    Arc::new(move |index: usize, task: &str| {
        let child_id = format!("{}-{}-{index}", parent.id, &uuid::Uuid::new_v4().simple().to_string()[..8]);
        let policy = match parent.state.get() {
            Some(state) => state.with_state_lock(|s| s.confirmation_policy()).map_err(|e| e.to_string())?,
            None => ConfirmationPolicy::AlwaysConfirm,
        };
        let options = ConversationOptions {
            conversation_id: Some(child_id.clone()),
            persistence_dir: parent.children_dir.as_ref().map(|d| d.join(&child_id)),
            llms: Some(llms.clone()),
            tools: Some(tools.clone()),
            secrets: Some(secrets.clone()),
            confirmation_policy: Some(policy),
        };
        let child = LocalConversation::new(child_config.clone(), workspace.clone(), options).map_err(|e| e.to_string())?;
        child.send_message(task).map_err(|e| e.to_string())?;
        let status = child.run().map_err(|e| e.to_string())?;
        Ok(ChildReport { status, final_message: child.final_message().map_err(|e| e.to_string())? })
    })
}
