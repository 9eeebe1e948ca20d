//! The immutable event hierarchy, its JSON encoding, and the projection of an
//! event log into the message list sent to a model.
//!
//! Every event carries an [`EventId`], a UTC timestamp and a [`EventSource`].
//! The payload is a closed union discriminated by a top-level `kind` field on
//! the wire, e.g.
//!
//! ```json
//! {"id":"01J...","timestamp":"2025-01-01T00:00:00Z","source":"user","kind":"pause"}
//! ```

mod id;
mod view;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::security::RiskLevel;

pub use id::EventId;
pub use view::{apply_condensations, to_llm_messages, ViewError, SUMMARY_PREFIX};

/// Who produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    User,
    Agent,
    Environment,
    System,
}

/// One part of a chat message. Images are references (URL or `data:` URI),
/// never raw bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { url: String },
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        ContentPart::Text { text: text.into() }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, ContentPart::Image { .. })
    }
}

/// Role of a conversational [`MessageEvent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEvent {
    pub role: MessageRole,
    pub content: Vec<ContentPart>,
}

impl MessageEvent {
    /// Concatenation of all text parts, separated by newlines.
    pub fn text(&self) -> String {
        let texts: Vec<&str> = self
            .content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect();
        texts.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemPromptEvent {
    pub prompt: String,
    /// Tool schemas in chat-completions function-tool form.
    pub tools: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub tool_name: String,
    pub tool_call_id: String,
    pub arguments: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub security_risk: RiskLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    pub tool_call_id: String,
    pub tool_name: String,
    pub result: Value,
    pub llm_text: String,
    #[serde(default)]
    pub is_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRejectObservation {
    pub tool_call_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentErrorEvent {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensationSummaryEvent {
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condensation {
    pub forgotten_event_ids: Vec<EventId>,
    pub summary: String,
    /// Where the summary is placed: the first forgotten event.
    pub anchor: EventId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationStateUpdateEvent {
    pub field: String,
    pub value: Value,
}

/// Kind-specific payload of an [`Event`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    Message(MessageEvent),
    SystemPrompt(SystemPromptEvent),
    Action(ActionEvent),
    Observation(ObservationEvent),
    UserReject(UserRejectObservation),
    AgentError(AgentErrorEvent),
    CondensationSummary(CondensationSummaryEvent),
    Condensation(Condensation),
    CondensationRequest,
    StateUpdate(ConversationStateUpdateEvent),
    Pause,
}

/// Wire names of every payload kind, in declaration order.
pub const EVENT_KINDS: [&str; 11] = [
    "message",
    "system_prompt",
    "action",
    "observation",
    "user_reject",
    "agent_error",
    "condensation_summary",
    "condensation",
    "condensation_request",
    "state_update",
    "pause",
];

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Message(_) => "message",
            EventPayload::SystemPrompt(_) => "system_prompt",
            EventPayload::Action(_) => "action",
            EventPayload::Observation(_) => "observation",
            EventPayload::UserReject(_) => "user_reject",
            EventPayload::AgentError(_) => "agent_error",
            EventPayload::CondensationSummary(_) => "condensation_summary",
            EventPayload::Condensation(_) => "condensation",
            EventPayload::CondensationRequest => "condensation_request",
            EventPayload::StateUpdate(_) => "state_update",
            EventPayload::Pause => "pause",
        }
    }

    /// Whether this variant is visible to the model.
    pub fn is_llm_convertible(&self) -> bool {
        !matches!(
            self,
            EventPayload::Condensation(_)
                | EventPayload::CondensationRequest
                | EventPayload::StateUpdate(_)
                | EventPayload::Pause
        )
    }

    /// The tool call this event answers, for observation-like variants.
    pub fn answered_tool_call(&self) -> Option<&str> {
        match self {
            EventPayload::Observation(o) => Some(&o.tool_call_id),
            EventPayload::UserReject(r) => Some(&r.tool_call_id),
            EventPayload::AgentError(e) => e.tool_call_id.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: EventId,
    pub timestamp: DateTime<Utc>,
    pub source: EventSource,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl Event {
    pub fn new(source: EventSource, payload: EventPayload) -> Self {
        Event {
            id: EventId::new(),
            timestamp: Utc::now(),
            source,
            payload,
        }
    }

    pub fn user_message(text: impl Into<String>) -> Self {
        Self::new(
            EventSource::User,
            EventPayload::Message(MessageEvent {
                role: MessageRole::User,
                content: vec![ContentPart::text(text)],
            }),
        )
    }

    pub fn assistant_message(text: impl Into<String>) -> Self {
        Self::new(
            EventSource::Agent,
            EventPayload::Message(MessageEvent {
                role: MessageRole::Assistant,
                content: vec![ContentPart::text(text)],
            }),
        )
    }

    pub fn kind(&self) -> &'static str {
        self.payload.kind()
    }

    pub fn as_action(&self) -> Option<&ActionEvent> {
        match &self.payload {
            EventPayload::Action(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EventCodecError {
    #[error("unknown event kind `{0}`")]
    UnknownKind(String),
    #[error("event schema violation: {0}")]
    SchemaViolation(String),
}

/// Encodes an event as compact JSON with a top-level `kind` discriminator.
pub fn serialize_event(event: &Event) -> String {
    serde_json::to_string(event).expect("events always serialize")
}

pub fn deserialize_event(text: &str) -> Result<Event, EventCodecError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| EventCodecError::SchemaViolation(format!("invalid JSON: {e}")))?;
    let Some(object) = value.as_object() else {
        return Err(EventCodecError::SchemaViolation("event must be a JSON object".into()));
    };
    match object.get("kind") {
        Some(Value::String(kind)) if !EVENT_KINDS.contains(&kind.as_str()) => {
            return Err(EventCodecError::UnknownKind(kind.clone()))
        }
        Some(Value::String(_)) => {}
        Some(_) => return Err(EventCodecError::SchemaViolation("`kind` must be a string".into())),
        None => return Err(EventCodecError::SchemaViolation("missing field `kind`".into())),
    }
    serde_json::from_value(value).map_err(|e| EventCodecError::SchemaViolation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fixed(payload: EventPayload) -> Event {
        Event {
            id: EventId::from_parts(1_700_000_000_000, 42),
            timestamp: "2025-01-02T03:04:05.678Z".parse().unwrap(),
            source: EventSource::User,
            payload,
        }
    }

    #[test]
    fn pause_has_only_envelope_fields() {
        let text = serialize_event(&fixed(EventPayload::Pause));
        let value: Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = value.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        assert_eq!(value["kind"], "pause");
    }

    #[test]
    fn action_arguments_are_embedded_verbatim() {
        let event = fixed(EventPayload::Action(ActionEvent {
            tool_name: "bash".into(),
            tool_call_id: "call_1".into(),
            arguments: json!({"command": "ls"}),
            thought: None,
            security_risk: RiskLevel::Low,
        }));
        let text = serialize_event(&event);
        assert!(text.contains(r#""arguments":{"command":"ls"}"#), "{text}");
        assert_eq!(deserialize_event(&text).unwrap(), event);
    }

    #[test]
    fn unknown_kind_is_reported() {
        assert_eq!(
            deserialize_event(r#"{"kind":"nonexistent"}"#),
            Err(EventCodecError::UnknownKind("nonexistent".into()))
        );
    }

    #[test]
    fn missing_field_is_schema_violation() {
        let event = fixed(EventPayload::Action(ActionEvent {
            tool_name: "bash".into(),
            tool_call_id: "c".into(),
            arguments: json!({}),
            thought: None,
            security_risk: RiskLevel::Unknown,
        }));
        let mut value: Value = serde_json::from_str(&serialize_event(&event)).unwrap();
        value.as_object_mut().unwrap().remove("tool_name");
        let err = deserialize_event(&value.to_string()).unwrap_err();
        assert!(matches!(err, EventCodecError::SchemaViolation(ref m) if m.contains("tool_name")), "{err}");
        assert!(matches!(
            deserialize_event(r#"{"kind":"action"}"#),
            Err(EventCodecError::SchemaViolation(_))
        ));
    }

    #[test]
    fn convertible_set_matches_event_table() {
        let internal = ["condensation", "condensation_request", "state_update", "pause"];
        for kind in EVENT_KINDS {
            let payload = sample_payload(kind);
            assert_eq!(payload.kind(), kind);
            assert_eq!(payload.is_llm_convertible(), !internal.contains(&kind), "{kind}");
        }
    }

    fn sample_payload(kind: &str) -> EventPayload {
        let id = EventId::from_parts(1, 1);
        match kind {
            "message" => EventPayload::Message(MessageEvent { role: MessageRole::User, content: vec![] }),
            "system_prompt" => EventPayload::SystemPrompt(SystemPromptEvent { prompt: String::new(), tools: vec![] }),
            "action" => EventPayload::Action(ActionEvent {
                tool_name: "t".into(),
                tool_call_id: "c".into(),
                arguments: json!({}),
                thought: None,
                security_risk: RiskLevel::Low,
            }),
            "observation" => EventPayload::Observation(ObservationEvent {
                tool_call_id: "c".into(),
                tool_name: "t".into(),
                result: json!(null),
                llm_text: "x".into(),
                is_error: false,
            }),
            "user_reject" => EventPayload::UserReject(UserRejectObservation { tool_call_id: "c".into(), note: None }),
            "agent_error" => EventPayload::AgentError(AgentErrorEvent { error: "e".into(), tool_call_id: None }),
            "condensation_summary" => EventPayload::CondensationSummary(CondensationSummaryEvent { summary: "s".into() }),
            "condensation" => EventPayload::Condensation(Condensation {
                forgotten_event_ids: vec![id],
                summary: "s".into(),
                anchor: id,
            }),
            "condensation_request" => EventPayload::CondensationRequest,
            "state_update" => EventPayload::StateUpdate(ConversationStateUpdateEvent { field: "title".into(), value: json!("t") }),
            "pause" => EventPayload::Pause,
            other => panic!("unexpected kind {other}"),
        }
    }
}
