//! The stateless agent: configuration, prompt assembly and the step function.
//!
//! [`Agent::step`] reads the conversation log, performs exactly one unit of
//! work (answer the oldest open tool call, or ask the model for the next
//! move) and records the result as events. It keeps no state of its own, so
//! any process holding the log and the configuration can continue a
//! conversation.

mod config;
mod skills;
mod stuck;
mod title;

use std::sync::Arc;

pub use config::{AgentConfig, AgentContext, Skill};
pub use skills::{activate_skills, build_system_prompt, load_skills_from_dir, render_triggered_skills, BASE_AGENT_PROMPT};
pub use stuck::detect_stuck;
pub use title::{fallback_title, generate_title, DEFAULT_TITLE};

use crate::condenser::{condense, should_condense};
use crate::events::{
    apply_condensations, to_llm_messages, ActionEvent, AgentErrorEvent, ContentPart, Event, EventPayload,
    EventSource, MessageEvent, MessageRole, ObservationEvent,
};
use crate::llm::{record_usage, LanguageModel, LlmError, LlmRegistry, LlmResponse, ToolSchema};
use crate::secrets::SecretRegistry;
use crate::security::{first_unmatched_action, requires_confirmation, strip_risk_field, RiskLevel};
use crate::state::{AgentStatus, MetadataUpdate, StateError, StateHandle};
use crate::tools::{validate_action, ToolContext, ToolDefinition, ToolError, ToolRegistry};

/// What one step achieved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// More work is possible; call `step` again.
    Continued,
    /// A tool call waits for the user's decision.
    AwaitingConfirmation,
    /// The model replied without a tool call, or a terminal tool succeeded.
    Finished,
    /// The model could not be reached.
    Errored,
    /// The loop repeats itself without progress.
    Stuck,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
}

/// A configuration bound to live model clients and tools.
pub struct Agent {
    config: AgentConfig,
    llm: Arc<dyn LanguageModel>,
    summarizer: Arc<dyn LanguageModel>,
    title_llm: Option<Arc<dyn LanguageModel>>,
    tools: Vec<ToolDefinition>,
    schemas: Vec<ToolSchema>,
    secrets: SecretRegistry,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("tools", &self.tools.iter().map(ToolDefinition::name).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        llms: &LlmRegistry,
        registry: &ToolRegistry,
        context: &ToolContext,
    ) -> Result<Self, AgentError> {
        if config.max_iterations == 0 {
            return Err(AgentError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if let Some(policy) = &config.condenser {
            policy.validate().map_err(|e| AgentError::InvalidConfig(e.to_string()))?;
        }
        let tools = registry.resolve_all(&config.tool_specs, context)?;
        let llm = llms.build(&config.llm);
        let summarizer: Arc<dyn LanguageModel> =
            match config.condenser.as_ref().and_then(|c| c.summarizer_llm.as_ref()) {
                Some(profile) => Arc::new(llms.bind_profile(profile)),
                None => llm.clone(),
            };
        let title_llm = config
            .title_llm
            .as_ref()
            .map(|p| Arc::new(llms.bind_profile(p)) as Arc<dyn LanguageModel>);
        let augment = config.security_analyzer.as_ref().is_some_and(|a| a.augments_schema());
        let schemas = tools
            .iter()
            .map(|t| {
                let mut schema = t.to_schema();
                if augment {
                    schema.parameters = crate::security::augment_schema(&schema.parameters);
                }
                schema
            })
            .collect();
        Ok(Agent { config, llm, summarizer, title_llm, tools, schemas, secrets: context.secrets.clone() })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn tools(&self) -> &[ToolDefinition] {
        &self.tools
    }

    pub fn title_llm(&self) -> Option<Arc<dyn LanguageModel>> {
        self.title_llm.clone()
    }

    pub fn system_prompt(&self) -> Event {
        Event::new(EventSource::Agent, EventPayload::SystemPrompt(build_system_prompt(&self.config, &self.tools)))
    }

    /// Builds the user message event for `content`, applying the configured
    /// message prefix and appending the skills the text triggers.
    pub fn user_message(&self, content: Vec<ContentPart>) -> Event {
        let ctx = &self.config.context;
        let mut parts = Vec::with_capacity(content.len() + 2);
        if let Some(prefix) = ctx.user_message_prefix.as_deref().filter(|p| !p.is_empty()) {
            parts.push(ContentPart::text(prefix));
        }
        let text = MessageEvent { role: MessageRole::User, content: content.clone() }.text();
        parts.extend(content);
        if let Some(skills) = render_triggered_skills(&activate_skills(&ctx.skills, &text)) {
            parts.push(ContentPart::text(skills));
        }
        Event::new(EventSource::User, EventPayload::Message(MessageEvent { role: MessageRole::User, content: parts }))
    }

    pub fn step(&self, state: &StateHandle) -> Result<StepOutcome, StateError> {
        self.step_counted(state).map(|(outcome, _)| outcome)
    }

    /// Like [`step`](Self::step), also reporting whether the agent model was
    /// called.
    pub fn step_counted(&self, state: &StateHandle) -> Result<(StepOutcome, bool), StateError> {
        let pending = state.with_state_lock(|s| {
            let events = s.events().as_slice();
            first_unmatched_action(events).and_then(|i| events[i].as_action().cloned())
        })?;
        if let Some(action) = pending {
            return Ok((self.process_action(state, &action)?, false));
        }

        let view = match self.build_view(state)? {
            Ok(view) => view,
            Err(message) => return Ok((self.fail(state, message)?, false)),
        };
        let messages = match to_llm_messages(&view) {
            Ok(m) => m,
            Err(e) => return Ok((self.fail(state, e.to_string())?, false)),
        };
        let completion = match self.llm.complete(&messages, &self.schemas) {
            Ok(c) => c,
            Err(e) => return Ok((self.llm_failure(state, e)?, true)),
        };
        state.with_state_lock(|s| {
            let stats = record_usage(s.stats(), &completion.response, &completion.profile);
            s.update_metadata(MetadataUpdate::Stats(stats))
        })??;
        Ok((self.handle_reply(state, completion.response)?, true))
    }

    fn build_view(&self, state: &StateHandle) -> Result<Result<Vec<Event>, String>, StateError> {
        let log = state.events_snapshot()?;
        let view = match apply_condensations(&log) {
            Ok(v) => v,
            Err(e) => return Ok(Err(e.to_string())),
        };
        let Some(policy) = &self.config.condenser else {
            return Ok(Ok(view));
        };
        if !should_condense(policy, &view) {
            return Ok(Ok(view));
        }
        state.append_event(Event::new(EventSource::Agent, EventPayload::CondensationRequest))?;
        match condense(policy, self.summarizer.as_ref(), &view) {
            Ok((condensation, completion)) => {
                state.with_state_lock(|s| {
                    s.append_event(Event::new(EventSource::Agent, EventPayload::Condensation(condensation)))?;
                    let stats = record_usage(s.stats(), &completion.response, &completion.profile);
                    s.update_metadata(MetadataUpdate::Stats(stats))
                })??;
                let log = state.events_snapshot()?;
                Ok(apply_condensations(&log).map_err(|e| e.to_string()))
            }
            Err(e) => {
                log::warn!("condensation skipped: {e}");
                Ok(Ok(view))
            }
        }
    }

    fn fail(&self, state: &StateHandle, message: String) -> Result<StepOutcome, StateError> {
        state.append_event(agent_error(self.secrets.mask(&message), None))?;
        Ok(StepOutcome::Errored)
    }

    fn llm_failure(&self, state: &StateHandle, error: LlmError) -> Result<StepOutcome, StateError> {
        let recoverable = error.is_model_recoverable();
        state.append_event(agent_error(self.secrets.mask(&error.to_string()), None))?;
        if recoverable {
            self.after_tool_step(state)
        } else {
            Ok(StepOutcome::Errored)
        }
    }

    fn handle_reply(&self, state: &StateHandle, response: LlmResponse) -> Result<StepOutcome, StateError> {
        let message = response.message;
        if message.tool_calls.is_empty() {
            let event = Event::new(
                EventSource::Agent,
                EventPayload::Message(MessageEvent { role: MessageRole::Assistant, content: message.content }),
            );
            state.append_event(event)?;
            return Ok(StepOutcome::Finished);
        }
        let thought = Some(message.text_content()).filter(|t| !t.trim().is_empty());
        let actions: Vec<ActionEvent> = message
            .tool_calls
            .into_iter()
            .enumerate()
            .map(|(i, call)| {
                let security_risk = match &self.config.security_analyzer {
                    Some(analyzer) => analyzer.analyze(&call.name, &call.arguments),
                    None => RiskLevel::Unknown,
                };
                ActionEvent {
                    tool_name: call.name,
                    tool_call_id: call.id,
                    arguments: self.secrets.mask_json(&call.arguments),
                    thought: if i == 0 { thought.clone() } else { None },
                    security_risk,
                }
            })
            .collect();
        let first = actions[0].clone();
        state.with_state_lock(|s| {
            for action in actions {
                s.append_event(Event::new(EventSource::Agent, EventPayload::Action(action)))?;
            }
            Ok::<_, StateError>(())
        })??;
        self.process_action(state, &first)
    }

    fn find_tool(&self, name: &str) -> Option<&ToolDefinition> {
        self.tools.iter().find(|t| t.name() == name)
    }

    /// Validates, gates and executes one logged action.
    fn process_action(&self, state: &StateHandle, action: &ActionEvent) -> Result<StepOutcome, StateError> {
        let id = action.tool_call_id.as_str();
        let Some(tool) = self.find_tool(&action.tool_name) else {
            let error = ToolError::UnknownTool {
                name: action.tool_name.clone(),
                available: self.tools.iter().map(|t| t.name().to_string()).collect(),
            };
            state.append_event(agent_error(error.to_string(), Some(id)))?;
            return self.after_tool_step(state);
        };
        let raw = if self.config.security_analyzer.as_ref().is_some_and(|a| a.augments_schema()) {
            strip_risk_field(&action.arguments)
        } else {
            action.arguments.clone()
        };
        let validated = match validate_action(tool, &raw) {
            Ok(v) => v,
            Err(e) => {
                state.append_event(agent_error(e.to_string(), Some(id)))?;
                return self.after_tool_step(state);
            }
        };
        let gated = state.with_state_lock(|s| {
            if s.agent_status() == AgentStatus::WaitingForConfirmation {
                return Ok(true);
            }
            if s.take_approval(id) || !requires_confirmation(&s.confirmation_policy(), action.security_risk) {
                return Ok(false);
            }
            s.update_metadata(MetadataUpdate::AgentStatus(AgentStatus::WaitingForConfirmation))?;
            Ok::<_, StateError>(true)
        })??;
        if gated {
            return Ok(StepOutcome::AwaitingConfirmation);
        }

        let event = match tool.execute(&validated) {
            Ok(obs) => Event::new(
                EventSource::Environment,
                EventPayload::Observation(ObservationEvent {
                    tool_call_id: id.to_string(),
                    tool_name: obs.tool_name,
                    result: self.secrets.mask_json(&obs.result),
                    llm_text: self.secrets.mask(&obs.llm_text),
                    is_error: obs.is_error,
                }),
            ),
            Err(e) => agent_error(self.secrets.mask(&e.to_string()), Some(id)),
        };
        let succeeded = matches!(&event.payload, EventPayload::Observation(o) if !o.is_error);
        state.append_event(event)?;
        if tool.is_terminal() && succeeded {
            return Ok(StepOutcome::Finished);
        }
        self.after_tool_step(state)
    }

    fn after_tool_step(&self, state: &StateHandle) -> Result<StepOutcome, StateError> {
        let stuck = state.with_state_lock(|s| detect_stuck(s.events().as_slice(), self.config.stuck_window))?;
        Ok(if stuck { StepOutcome::Stuck } else { StepOutcome::Continued })
    }
}

fn agent_error(error: String, tool_call_id: Option<&str>) -> Event {
    Event::new(
        EventSource::Agent,
        EventPayload::AgentError(AgentErrorEvent { error, tool_call_id: tool_call_id.map(str::to_string) }),
    )
}
