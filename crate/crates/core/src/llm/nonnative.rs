//! Prompt-based tool calling for models without a native tool field.
//!
//! Tool schemas are rendered into the system prompt, and the model is asked
//! to answer with exactly one fenced block tagged `tool_call`:
//!
//! ````text
//! I will list the files.
//! ```tool_call
//! {"name": "bash", "arguments": {"command": "ls"}}
//! ```
//! ````
//!
//! Only the first block in a reply is used; text outside it becomes the
//! thought.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use super::{LlmError, Message, Role, ToolCall, ToolSchema};
use crate::events::ContentPart;

pub const FENCE_TAG: &str = "tool_call";

static BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```tool_call[ \t]*\r?\n(.*?)```").expect("valid regex"));

pub fn render_nonnative_prompt(tools: &[ToolSchema]) -> String {
    let mut out = String::from(
        "You can call tools. To call a tool, write any reasoning first, then exactly one fenced code block \
         tagged tool_call containing a JSON object with the tool name and its arguments:\n\n\
         ```tool_call\n{\"name\": \"<tool name>\", \"arguments\": {<arguments>}}\n```\n\n\
         Only the first tool_call block in a reply is used. If no tool is needed, reply without a block.\n\n\
         Available tools:\n",
    );
    for tool in tools {
        out.push_str(&format!(
            "\n### {}\n{}\nParameters (JSON Schema):\n{}\n",
            tool.name,
            tool.description,
            serde_json::to_string_pretty(&tool.parameters).expect("schema serializes")
        ));
    }
    out
}

/// Splits a reply into its thought and the first tool call, if any.
///
/// A reply without a block is plain text (no error). A block whose body is
/// not a `{"name", "arguments"}` JSON object is [`LlmError::InvalidToolJson`].
pub fn parse_nonnative_reply(text: &str) -> Result<(String, Option<ToolCall>), LlmError> {
    let Some(captures) = BLOCK.captures(text) else {
        return Ok((text.to_string(), None));
    };
    let whole = captures.get(0).expect("match");
    let body = captures.get(1).expect("group").as_str();
    let value: Value = serde_json::from_str(body.trim()).map_err(|e| LlmError::InvalidToolJson(e.to_string()))?;
    let name = value
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::InvalidToolJson("missing string field `name`".into()))?
        .to_string();
    let arguments = match value.get("arguments") {
        Some(Value::Object(map)) => Value::Object(map.clone()),
        None => Value::Object(Default::default()),
        Some(_) => return Err(LlmError::InvalidToolJson("`arguments` must be an object".into())),
    };
    let before = text[..whole.start()].trim();
    let after = text[whole.end()..].trim();
    let thought = match (before.is_empty(), after.is_empty()) {
        (false, false) => format!("{before}\n{after}"),
        (false, true) => before.to_string(),
        (true, false) => after.to_string(),
        (true, true) => String::new(),
    };
    let id = format!("call_{}", uuid::Uuid::new_v4().simple());
    Ok((thought, Some(ToolCall { id, name, arguments })))
}

/// Renders a tool call the way the model is asked to write it.
pub fn render_tool_call_block(call: &ToolCall) -> String {
    let body = serde_json::json!({"name": call.name, "arguments": call.arguments});
    format!("```{FENCE_TAG}\n{body}\n```")
}

/// Rewrites a native-style history for a model that only sees text: tool
/// instructions join the system prompt, tool calls become fenced blocks and
/// tool results become user messages.
pub fn rewrite_messages(messages: &[Message], tools: &[ToolSchema]) -> Vec<Message> {
    let instructions = render_nonnative_prompt(tools);
    let mut out = Vec::with_capacity(messages.len() + 1);
    if messages.first().map(|m| m.role) != Some(Role::System) {
        out.push(Message::system(instructions.clone()));
    }
    for (i, message) in messages.iter().enumerate() {
        match message.role {
            Role::System if i == 0 => {
                out.push(Message::system(format!("{}\n\n{instructions}", message.text_content())));
            }
            Role::Assistant if !message.tool_calls.is_empty() => {
                let mut text = message.text_content();
                for call in &message.tool_calls {
                    if !text.is_empty() {
                        text.push('\n');
                    }
                    text.push_str(&render_tool_call_block(call));
                }
                out.push(Message::assistant(text));
            }
            Role::Tool => {
                let id = message.tool_call_id.as_deref().unwrap_or("?");
                out.push(Message {
                    role: Role::User,
                    content: vec![ContentPart::text(format!(
                        "Tool result for call {id}:\n{}",
                        message.text_content()
                    ))],
                    tool_calls: Vec::new(),
                    tool_call_id: None,
                });
            }
            _ => out.push(message.clone()),
        }
    }
    out
}
