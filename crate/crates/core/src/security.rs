//! Risk assessment of proposed actions and the confirmation gate.
//!
//! Assessment (a [`SecurityAnalyzer`] producing a [`RiskLevel`]) is kept
//! separate from enforcement (a [`ConfirmationPolicy`] deciding whether a
//! human must approve). Under [`ConfirmationPolicy::ConfirmRisky`] an action
//! is gated when its risk is *at or above* the threshold, and `unknown` is
//! ranked like `high`, so the default threshold blocks exactly `high` and
//! `unknown` actions.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::events::{Event, EventPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
    #[default]
    Unknown,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 4] = [RiskLevel::Low, RiskLevel::Medium, RiskLevel::High, RiskLevel::Unknown];

    /// Gating order: low < medium < high, with unknown ranked as high.
    pub fn gate_rank(self) -> u8 {
        match self {
            RiskLevel::Low => 0,
            RiskLevel::Medium => 1,
            RiskLevel::High | RiskLevel::Unknown => 2,
        }
    }

    /// Case-insensitive parse; anything unrecognised is `unknown`.
    pub fn parse_lenient(text: &str) -> RiskLevel {
        match text.trim().to_ascii_lowercase().as_str() {
            "low" => RiskLevel::Low,
            "medium" => RiskLevel::Medium,
            "high" => RiskLevel::High,
            _ => RiskLevel::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Medium => "medium",
            RiskLevel::High => "high",
            RiskLevel::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfirmationPolicy {
    NeverConfirm,
    AlwaysConfirm,
    ConfirmRisky {
        #[serde(default = "default_threshold")]
        threshold: RiskLevel,
    },
}

fn default_threshold() -> RiskLevel {
    RiskLevel::High
}

impl Default for ConfirmationPolicy {
    fn default() -> Self {
        ConfirmationPolicy::NeverConfirm
    }
}

impl ConfirmationPolicy {
    pub fn confirm_risky() -> Self {
        ConfirmationPolicy::ConfirmRisky { threshold: RiskLevel::High }
    }
}

pub fn requires_confirmation(policy: &ConfirmationPolicy, risk: RiskLevel) -> bool {
    match policy {
        ConfirmationPolicy::NeverConfirm => false,
        ConfirmationPolicy::AlwaysConfirm => true,
        ConfirmationPolicy::ConfirmRisky { threshold } => risk.gate_rank() >= threshold.gate_rank(),
    }
}

/// Name of the argument the model fills in when the LLM analyzer is active.
pub const SECURITY_RISK_FIELD: &str = "security_risk";

/// Serializable analyzer selection carried in the agent configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecurityAnalyzer {
    /// Reads the model-supplied `security_risk` argument.
    Llm,
    /// Maps a fixed allow-list of read-only shell commands to low, anything
    /// else to unknown.
    ReadOnlyRules,
}

impl SecurityAnalyzer {
    /// Whether tool schemas must be augmented with the `security_risk` field.
    pub fn augments_schema(&self) -> bool {
        matches!(self, SecurityAnalyzer::Llm)
    }

    pub fn analyze(&self, tool_name: &str, raw_args: &Value) -> RiskLevel {
        match self {
            SecurityAnalyzer::Llm => match raw_args.get(SECURITY_RISK_FIELD) {
                Some(Value::String(text)) => RiskLevel::parse_lenient(text),
                _ => RiskLevel::Unknown,
            },
            SecurityAnalyzer::ReadOnlyRules => read_only_rule(tool_name, raw_args),
        }
    }
}

const READ_ONLY_COMMANDS: &[&str] = &["ls", "cat", "pwd", "grep", "rg", "head", "tail", "wc", "echo", "find"];

fn read_only_rule(tool_name: &str, raw_args: &Value) -> RiskLevel {
    if tool_name == "finish" {
        return RiskLevel::Low;
    }
    if tool_name == "file_editor" {
        return match raw_args.get("op").and_then(Value::as_str) {
            Some("read") => RiskLevel::Low,
            _ => RiskLevel::Unknown,
        };
    }
    if tool_name != "bash" {
        return RiskLevel::Unknown;
    }
    let Some(command) = raw_args.get("command").and_then(Value::as_str) else {
        return RiskLevel::Unknown;
    };
    if command.contains(['>', ';', '&', '|', '`', '$']) {
        return RiskLevel::Unknown;
    }
    match command.split_whitespace().next() {
        Some(program) if READ_ONLY_COMMANDS.contains(&program) => RiskLevel::Low,
        _ => RiskLevel::Unknown,
    }
}

/// Splits the `security_risk` argument off the model's raw arguments.
pub fn strip_risk_field(raw_args: &Value) -> Value {
    match raw_args {
        Value::Object(map) => {
            let filtered: Map<String, Value> = map
                .iter()
                .filter(|(k, _)| k.as_str() != SECURITY_RISK_FIELD)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            Value::Object(filtered)
        }
        other => other.clone(),
    }
}

/// Adds the `security_risk` enum property to an action schema.
pub fn augment_schema(schema: &Value) -> Value {
    let mut schema = schema.clone();
    if let Some(props) = schema.get_mut("properties").and_then(Value::as_object_mut) {
        props.insert(
            SECURITY_RISK_FIELD.into(),
            serde_json::json!({
                "type": "string",
                "enum": ["low", "medium", "high"],
                "description": "Your assessment of the risk of this action: low for read-only, medium for reversible changes, high for destructive or system-wide effects."
            }),
        );
    }
    if let Some(required) = schema.get_mut("required").and_then(Value::as_array_mut) {
        required.push(Value::String(SECURITY_RISK_FIELD.into()));
    }
    schema
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmationDecision {
    Approve,
    Reject,
}

/// Index of the oldest action in the log that has no observation, rejection
/// or error answering it.
pub fn first_unmatched_action(events: &[Event]) -> Option<usize> {
    let answered: std::collections::HashSet<&str> =
        events.iter().filter_map(|e| e.payload.answered_tool_call()).collect();
    events.iter().position(|e| match &e.payload {
        EventPayload::Action(a) => !answered.contains(a.tool_call_id.as_str()),
        _ => false,
    })
}
