use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_typed, Action, ToolContext, ToolDefinition, ToolError, ToolExecutor, ToolOutput};
use crate::state::AgentStatus;

const DESCRIPTION: &str = "Hand independent sub-tasks to sub-agents. Each task runs in its own conversation \
with the same model and workspace; all tasks run concurrently and this call returns when every one is done.";

/// Outcome of one child conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildReport {
    pub status: AgentStatus,
    pub final_message: Option<String>,
}

impl ChildReport {
    fn succeeded(&self) -> bool {
        !matches!(self.status, AgentStatus::Error | AgentStatus::Stuck)
    }
}

/// Runs task `index` to completion and reports how it ended.
pub type ChildSpawner = Arc<dyn Fn(usize, &str) -> Result<ChildReport, String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelegateParams {
    pub max_tasks: u64,
}

impl Default for DelegateParams {
    fn default() -> Self {
        DelegateParams { max_tasks: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelegateArgs {
    pub tasks: Vec<String>,
}

impl DelegateArgs {
    pub fn parse(raw: &Value, max_tasks: u64) -> Result<Self, String> {
        let args: DelegateArgs = parse_typed(raw)?;
        if args.tasks.is_empty() || args.tasks.len() as u64 > max_tasks {
            return Err(format!("between 1 and {max_tasks} tasks are required"));
        }
        Ok(args)
    }
}

pub fn schema(params: &DelegateParams) -> Value {
    json!({
        "type": "object",
        "properties": {
            "tasks": {
                "type": "array",
                "items": {"type": "string"},
                "minItems": 1,
                "maxItems": params.max_tasks,
                "description": "One instruction per sub-agent."
            }
        },
        "required": ["tasks"],
        "additionalProperties": false
    })
}

struct Delegate {
    params: DelegateParams,
    spawner: Option<ChildSpawner>,
}

pub(super) fn resolve(params: &Value, ctx: &ToolContext) -> Result<ToolDefinition, String> {
    let params: DelegateParams = serde_json::from_value(params.clone()).map_err(|e| e.to_string())?;
    if params.max_tasks == 0 {
        return Err("max_tasks must be positive".into());
    }
    let schema = schema(&params);
    let tool = Delegate { params, spawner: ctx.spawner.clone() };
    ToolDefinition::new("delegate", DESCRIPTION, &schema, Arc::new(tool))
        .map(|t| t.with_renderer(render))
        .map_err(|e| e.to_string())
}

/// Numbered list of (task, status, final message).
fn render(output: &ToolOutput) -> String {
    let mut out = String::new();
    for (i, child) in output.result["children"].as_array().into_iter().flatten().enumerate() {
        let task = child["task"].as_str().unwrap_or("");
        let status = child["status"].as_str().unwrap_or("error");
        out.push_str(&format!("{}. Task: {task}\n   Status: {status}\n", i + 1));
        match (child["final_message"].as_str(), child["error"].as_str()) {
            (_, Some(err)) => out.push_str(&format!("   Error: {err}\n")),
            (Some(msg), None) => out.push_str(&format!("   Result: {msg}\n")),
            (None, None) => out.push_str("   Result: (no final message)\n"),
        }
    }
    out
}

impl ToolExecutor for Delegate {
    fn execute(&self, action: &Action) -> Result<ToolOutput, ToolError> {
        let args = DelegateArgs::parse(action.arguments(), self.params.max_tasks).map_err(ToolError::Execution)?;
        let spawner = self
            .spawner
            .clone()
            .ok_or_else(|| ToolError::Execution("delegation is not available in this conversation".into()))?;
        let reports: Vec<Result<ChildReport, String>> = thread::scope(|scope| {
            let handles: Vec<_> = args
                .tasks
                .iter()
                .enumerate()
                .map(|(i, task)| {
                    let spawner = Arc::clone(&spawner);
                    scope.spawn(move || spawner(i, task))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("sub-agent panicked".into())))
                .collect()
        });
        let mut any_ok = false;
        let children: Vec<Value> = args
            .tasks
            .iter()
            .zip(reports)
            .map(|(task, report)| match report {
                Ok(r) => {
                    any_ok |= r.succeeded();
                    let mut entry = json!({"task": task, "status": r.status.as_str(), "final_message": r.final_message});
                    if !r.succeeded() {
                        entry["error"] = json!(format!("sub-agent ended with status {}", r.status.as_str()));
                    }
                    entry
                }
                Err(e) => json!({"task": task, "status": "error", "final_message": null, "error": e}),
            })
            .collect();
        Ok(ToolOutput { result: json!({ "children": children }), is_error: !any_ok })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secrets::SecretRegistry;
    use crate::tools::validate_action;
    use crate::workspace::Workspace;

    fn tool(spawner: ChildSpawner) -> ToolDefinition {
        let dir = tempfile::tempdir().unwrap();
        let mut ctx = ToolContext::new(Workspace::local(dir.path()).unwrap(), SecretRegistry::new());
        ctx.spawner = Some(spawner);
        resolve(&json!({}), &ctx).unwrap()
    }

    #[test]
    fn aggregates_children() {
        let t = tool(Arc::new(|_, task: &str| {
            if task == "fail" {
                Err("boom".into())
            } else {
                Ok(ChildReport { status: AgentStatus::Finished, final_message: Some(task.to_uppercase()) })
            }
        }));
        let obs = t.execute(&validate_action(&t, &json!({"tasks": ["say a", "fail"]})).unwrap()).unwrap();
        assert!(!obs.is_error);
        assert!(obs.llm_text.contains("1. Task: say a\n   Status: finished\n   Result: SAY A"));
        assert!(obs.llm_text.contains("2. Task: fail\n   Status: error\n   Error: boom"));
    }

    #[test]
    fn all_failed_is_error() {
        let t = tool(Arc::new(|_, _: &str| Err("down".into())));
        let obs = t.execute(&validate_action(&t, &json!({"tasks": ["x"]})).unwrap()).unwrap();
        assert!(obs.is_error);
    }

    #[test]
    fn task_count_bounds() {
        let t = tool(Arc::new(|_, _: &str| Err("unused".into())));
        assert!(validate_action(&t, &json!({"tasks": []})).is_err());
        assert!(validate_action(&t, &json!({"tasks": ["1", "2", "3", "4", "5"]})).is_err());
        assert!(DelegateArgs::parse(&json!({"tasks": []}), 4).is_err());
    }
}
