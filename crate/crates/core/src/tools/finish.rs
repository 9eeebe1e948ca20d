use std::sync::Arc;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{parse_typed, Action, ToolContext, ToolDefinition, ToolError, ToolOutput};

const DESCRIPTION: &str = "Signal that the task is complete. Give a short summary of what was done.";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinishArgs {
    pub summary: String,
}

impl FinishArgs {
    pub fn parse(raw: &Value) -> Result<Self, String> {
        let args: FinishArgs = parse_typed(raw)?;
        if args.summary.is_empty() {
            return Err("summary must not be empty".into());
        }
        Ok(args)
    }
}

pub fn schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "summary": {"type": "string", "minLength": 1, "description": "What was accomplished."}
        },
        "required": ["summary"],
        "additionalProperties": false
    })
}

fn execute(action: &Action) -> Result<ToolOutput, ToolError> {
    let args = FinishArgs::parse(action.arguments()).map_err(ToolError::Execution)?;
    Ok(ToolOutput::ok(json!({ "summary": args.summary })))
}

pub(super) fn resolve(params: &Value, _ctx: &ToolContext) -> Result<ToolDefinition, String> {
    if params.as_object().is_some_and(|p| !p.is_empty()) {
        return Err("finish takes no parameters".into());
    }
    ToolDefinition::new("finish", DESCRIPTION, &schema(), Arc::new(execute))
        .map(|t| t.terminal().with_renderer(|o| o.result["summary"].as_str().unwrap_or_default().to_string()))
        .map_err(|e| e.to_string())
}
