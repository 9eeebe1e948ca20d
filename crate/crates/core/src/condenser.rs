//! Keeps the model-visible history bounded.
//!
//! When the applied view grows past `max_view_events`, everything between a
//! fixed head and tail is summarized by one model call and a
//! [`Condensation`] naming the forgotten events is appended to the log. The
//! log itself never shrinks; [`apply_condensations`](crate::events::apply_condensations)
//! does the filtering.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::events::{Condensation, Event, EventPayload, MessageRole};
use crate::llm::{Completion, LanguageModel, LlmError, LlmProfile, Message};

/// Versioned summarizer template with `{previous_summary}` and `{events}`
/// placeholders.
pub const SUMMARIZER_PROMPT: &str = include_str!("../assets/summarizer_prompt.v1.md");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondenserPolicy {
    pub max_view_events: usize,
    pub keep_head: usize,
    pub keep_tail: usize,
    /// Model used for summaries; the agent's model when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summarizer_llm: Option<LlmProfile>,
}

impl Default for CondenserPolicy {
    fn default() -> Self {
        CondenserPolicy { max_view_events: 80, keep_head: 4, keep_tail: 20, summarizer_llm: None }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CondenserError {
    #[error("invalid condenser policy: keep_head + keep_tail must be below max_view_events")]
    InvalidPolicy,
    #[error("summarizer failed: {0}")]
    SummarizerFailure(String),
    #[error("nothing to condense")]
    NothingToForget,
}

impl CondenserPolicy {
    pub fn validate(&self) -> Result<(), CondenserError> {
        if self.keep_head + self.keep_tail < self.max_view_events {
            Ok(())
        } else {
            Err(CondenserError::InvalidPolicy)
        }
    }
}

pub fn should_condense(policy: &CondenserPolicy, view: &[Event]) -> bool {
    view.len() > policy.max_view_events
}

/// Indices of the view events to forget.
///
/// Starts from `[keep_head, len - keep_tail)`, never forgets the system
/// prompt, and keeps each tool call together with its answer: the end moves
/// forward over answers of forgotten calls, and answers of kept calls stay.
pub fn select_forgotten(policy: &CondenserPolicy, view: &[Event]) -> Vec<usize> {
    let len = view.len();
    let start = policy.keep_head.min(len);
    let mut end = len.saturating_sub(policy.keep_tail).max(start);

    let mut answer_at: HashMap<&str, usize> = HashMap::new();
    let mut action_at: HashMap<&str, usize> = HashMap::new();
    for (i, event) in view.iter().enumerate() {
        if let Some(id) = event.payload.answered_tool_call() {
            answer_at.entry(id).or_insert(i);
        }
        if let EventPayload::Action(a) = &event.payload {
            action_at.insert(a.tool_call_id.as_str(), i);
        }
    }
    loop {
        let far = (start..end)
            .filter_map(|i| view[i].as_action())
            .filter_map(|a| answer_at.get(a.tool_call_id.as_str()).copied())
            .max();
        match far {
            Some(j) if j >= end => end = j + 1,
            _ => break,
        }
    }
    let in_range: HashSet<usize> = (start..end).collect();
    (start..end)
        .filter(|&i| !matches!(view[i].payload, EventPayload::SystemPrompt(_)))
        .filter(|&i| match view[i].payload.answered_tool_call() {
            Some(id) => action_at.get(id).is_none_or(|a| in_range.contains(a)),
            None => true,
        })
        .collect()
}

fn event_line(event: &Event) -> Option<String> {
    Some(match &event.payload {
        EventPayload::Message(m) => {
            let who = match m.role {
                MessageRole::User => "User",
                MessageRole::Assistant => "Assistant",
            };
            format!("{who}: {}", m.text())
        }
        EventPayload::Action(a) => {
            let thought = a.thought.as_deref().map(|t| format!("{t}\n")).unwrap_or_default();
            format!("{thought}Assistant called {} with {}", a.tool_name, a.arguments)
        }
        EventPayload::Observation(o) => format!("Result of {}: {}", o.tool_name, o.llm_text),
        EventPayload::UserReject(r) => match &r.note {
            Some(note) => format!("User rejected the action ({note})"),
            None => "User rejected the action".to_string(),
        },
        EventPayload::AgentError(e) => format!("Error: {}", e.error),
        EventPayload::CondensationSummary(_)
        | EventPayload::SystemPrompt(_)
        | EventPayload::Condensation(_)
        | EventPayload::CondensationRequest
        | EventPayload::StateUpdate(_)
        | EventPayload::Pause => return None,
    })
}

/// Fills the summarizer template for the given forgotten events. Prior
/// summaries among them are chained in as the previous summary.
pub fn summarizer_prompt(forgotten: &[&Event]) -> String {
    let previous: Vec<&str> = forgotten
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::CondensationSummary(s) => Some(s.summary.as_str()),
            _ => None,
        })
        .collect();
    let events: Vec<String> = forgotten.iter().filter_map(|e| event_line(e)).collect();
    let previous = if previous.is_empty() { "(none)".to_string() } else { previous.join("\n\n") };
    SUMMARIZER_PROMPT.replace("{previous_summary}", &previous).replace("{events}", &events.join("\n\n"))
}

/// Summarizes the middle of `view`. The caller appends the returned
/// condensation; the completion is returned for usage accounting.
pub fn condense(
    policy: &CondenserPolicy,
    llm: &dyn LanguageModel,
    view: &[Event],
) -> Result<(Condensation, Completion), CondenserError> {
    let forgotten = select_forgotten(policy, view);
    let Some(&first) = forgotten.first() else {
        return Err(CondenserError::NothingToForget);
    };
    let events: Vec<&Event> = forgotten.iter().map(|&i| &view[i]).collect();
    let prompt = summarizer_prompt(&events);
    let completion = llm
        .complete(&[Message::user(prompt)], &[])
        .map_err(|e: LlmError| CondenserError::SummarizerFailure(e.to_string()))?;
    let summary = completion.response.message.text_content().trim().to_string();
    if summary.is_empty() {
        return Err(CondenserError::SummarizerFailure("empty summary".into()));
    }
    let condensation = Condensation {
        forgotten_event_ids: events.iter().map(|e| e.id).collect(),
        summary,
        anchor: view[first].id,
    };
    Ok((condensation, completion))
}
