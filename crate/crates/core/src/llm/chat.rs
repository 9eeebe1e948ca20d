use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{ChatBackend, ChatRequest, LlmError, LlmProfile, LlmResponse, Message, Role, ToolCall, Usage};
use crate::events::ContentPart;

/// Environment variable overriding the default request timeout (seconds).
pub const TIMEOUT_ENV: &str = "AGENTRT_LLM_TIMEOUT_SECS";

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
const DEFAULT_TIMEOUT_SECS: u64 = 120;

/// HTTP client for OpenAI-compatible `/chat/completions` endpoints.
#[derive(Debug, Default)]
pub struct ChatCompletionsBackend;

impl ChatCompletionsBackend {
    fn timeout(profile: &LlmProfile) -> Duration {
        let secs = profile
            .timeout_secs
            .or_else(|| std::env::var(TIMEOUT_ENV).ok().and_then(|v| v.parse().ok()))
            .unwrap_or(DEFAULT_TIMEOUT_SECS);
        Duration::from_secs(secs)
    }
}

impl ChatBackend for ChatCompletionsBackend {
    fn send(&self, profile: &LlmProfile, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let base = profile.base_url.as_deref().unwrap_or(DEFAULT_BASE_URL).trim_end_matches('/');
        let url = format!("{base}/chat/completions");
        let agent = ureq::AgentBuilder::new().timeout(Self::timeout(profile)).build();
        let mut call = agent.post(&url).set("Content-Type", "application/json");
        if let Some(key) = &profile.api_key {
            call = call.set("Authorization", &format!("Bearer {}", key.expose()));
        }
        let body = serialize_request(profile, request);
        match call.send_string(&body.to_string()) {
            Ok(response) => {
                let text = response.into_string().map_err(|e| LlmError::Transport(e.to_string()))?;
                let value: Value =
                    serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
                parse_chat_response(&value)
            }
            Err(ureq::Error::Status(status, response)) => Err(LlmError::ProviderError {
                status,
                body: response.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                if message.contains("timed out") || message.contains("Timeout") {
                    Err(LlmError::Timeout)
                } else {
                    Err(LlmError::Transport(message))
                }
            }
        }
    }
}

/// Wire model name: a leading `openai/` qualifier is dropped.
fn wire_model(model: &str) -> &str {
    model.strip_prefix("openai/").unwrap_or(model)
}

/// Full request body for a chat-completions call.
pub fn serialize_request(profile: &LlmProfile, request: &ChatRequest) -> Value {
    let mut body = Map::new();
    body.insert("model".into(), Value::String(wire_model(&profile.model).to_string()));
    body.insert("messages".into(), Value::Array(serialize_messages(&request.messages)));
    if !request.tools.is_empty() {
        body.insert("tools".into(), Value::Array(request.tools.iter().map(|t| t.to_chat_tool()).collect()));
    }
    if let Some(t) = profile.temperature {
        body.insert("temperature".into(), json!(t));
    }
    Value::Object(body)
}

/// Encodes messages in chat-completions form. Consecutive assistant messages
/// that carry tool calls are merged so every tool result follows the
/// assistant message that requested it.
pub fn serialize_messages(messages: &[Message]) -> Vec<Value> {
    let mut out: Vec<Value> = Vec::with_capacity(messages.len());
    let mut merge_open = false;
    for message in messages {
        if message.role == Role::Assistant && !message.tool_calls.is_empty() && merge_open {
            let last = out.last_mut().expect("merge target exists");
            let calls = last["tool_calls"].as_array_mut().expect("tool_calls array");
            calls.extend(message.tool_calls.iter().map(tool_call_json));
            let extra = message.text_content();
            if !extra.is_empty() {
                let joined = match last["content"].as_str() {
                    Some(existing) if !existing.is_empty() => format!("{existing}\n{extra}"),
                    _ => extra,
                };
                last["content"] = Value::String(joined);
            }
            continue;
        }
        merge_open = message.role == Role::Assistant && !message.tool_calls.is_empty();
        out.push(message_json(message));
    }
    out
}

fn message_json(message: &Message) -> Value {
    let role = match message.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut object = Map::new();
    object.insert("role".into(), Value::String(role.into()));
    let content = if message.contains_image() {
        Value::Array(
            message
                .content
                .iter()
                .map(|part| match part {
                    ContentPart::Text { text } => json!({"type": "text", "text": text}),
                    ContentPart::Image { url } => json!({"type": "image_url", "image_url": {"url": url}}),
                })
                .collect(),
        )
    } else if message.content.is_empty() && !message.tool_calls.is_empty() {
        Value::Null
    } else {
        Value::String(message.text_content())
    };
    object.insert("content".into(), content);
    if !message.tool_calls.is_empty() {
        object.insert("tool_calls".into(), Value::Array(message.tool_calls.iter().map(tool_call_json).collect()));
    }
    if let Some(id) = &message.tool_call_id {
        object.insert("tool_call_id".into(), Value::String(id.clone()));
    }
    Value::Object(object)
}

fn tool_call_json(call: &ToolCall) -> Value {
    json!({
        "id": call.id,
        "type": "function",
        "function": {"name": call.name, "arguments": call.arguments.to_string()},
    })
}

/// Decodes a chat-completions response body.
pub fn parse_chat_response(body: &Value) -> Result<LlmResponse, LlmError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0]".into()))?;
    let raw = choice
        .get("message")
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message".into()))?;
    let text = match raw.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    };
    let mut tool_calls = Vec::new();
    if let Some(calls) = raw.get("tool_calls").and_then(Value::as_array) {
        for call in calls {
            let id = call.get("id").and_then(Value::as_str).unwrap_or_default().to_string();
            let function = call
                .get("function")
                .ok_or_else(|| LlmError::MalformedResponse("tool call without function".into()))?;
            let name = function
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::MalformedResponse("tool call without name".into()))?
                .to_string();
            let arguments = match function.get("arguments") {
                Some(Value::String(s)) if s.trim().is_empty() => json!({}),
                Some(Value::String(s)) => {
                    serde_json::from_str(s).map_err(|e| LlmError::InvalidToolJson(format!("{name}: {e}")))?
                }
                Some(other) => other.clone(),
                None => json!({}),
            };
            tool_calls.push(ToolCall { id, name, arguments });
        }
    }
    let usage = body.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    let content = if text.is_empty() { Vec::new() } else { vec![ContentPart::text(text)] };
    Ok(LlmResponse {
        message: Message { role: Role::Assistant, content, tool_calls, tool_call_id: None },
        usage: usage.unwrap_or_default(),
        raw_finish_reason: choice.get("finish_reason").and_then(Value::as_str).unwrap_or_default().to_string(),
    })
}
