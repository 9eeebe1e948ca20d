use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_typed, Action, ToolContext, ToolDefinition, ToolError, ToolExecutor, ToolOutput};
use crate::workspace::Workspace;

const DESCRIPTION: &str = "Read, write or edit a file in the workspace. \
`read` returns numbered lines; `write` creates or overwrites the file with `content`; \
`replace` substitutes the single occurrence of `old` with `new`.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileEditorParams {
    pub max_read_lines: usize,
}

impl Default for FileEditorParams {
    fn default() -> Self {
        FileEditorParams { max_read_lines: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileOp {
    Read,
    Write,
    Replace,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEditorArgs {
    pub op: FileOp,
    pub path: String,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default)]
    pub old: Option<String>,
    #[serde(default)]
    pub new: Option<String>,
}

impl FileEditorArgs {
    pub fn parse(raw: &Value) -> Result<Self, String> {
        let args: FileEditorArgs = parse_typed(raw)?;
        if args.path.is_empty() {
            return Err("path must not be empty".into());
        }
        if args.old.as_deref() == Some("") {
            return Err("old must not be empty".into());
        }
        Ok(args)
    }
}

pub fn schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "op": {"type": "string", "enum": ["read", "write", "replace"], "description": "The operation to perform."},
            "path": {"type": "string", "minLength": 1, "description": "File path, relative to the workspace directory."},
            "content": {"type": "string", "description": "New file content, for write."},
            "old": {"type": "string", "minLength": 1, "description": "Exact text to replace; must occur exactly once."},
            "new": {"type": "string", "description": "Replacement text, for replace."}
        },
        "required": ["op", "path"],
        "additionalProperties": false
    })
}

struct FileEditor {
    params: FileEditorParams,
    workspace: Workspace,
}

pub(super) fn resolve(params: &Value, ctx: &ToolContext) -> Result<ToolDefinition, String> {
    let params: FileEditorParams = serde_json::from_value(params.clone()).map_err(|e| e.to_string())?;
    let tool = FileEditor { params, workspace: ctx.workspace.clone() };
    ToolDefinition::new("file_editor", DESCRIPTION, &schema(), Arc::new(tool))
        .map(|t| t.with_renderer(render))
        .map_err(|e| e.to_string())
}

fn render(output: &ToolOutput) -> String {
    output.result["message"].as_str().unwrap_or_default().to_string()
}

fn numbered(lines: &[&str], first: usize) -> String {
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        out.push_str(&format!("{:>6}\t{}\n", first + i, line));
    }
    out
}

fn missing(op: &str, field: &str) -> ToolError {
    ToolError::Execution(format!("{op} requires `{field}`"))
}

impl FileEditor {
    fn read_text(&self, path: &str) -> Result<String, ToolError> {
        let bytes = self.workspace.file_download(path)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

impl ToolExecutor for FileEditor {
    fn execute(&self, action: &Action) -> Result<ToolOutput, ToolError> {
        let args = FileEditorArgs::parse(action.arguments()).map_err(ToolError::Execution)?;
        let path = args.path.as_str();
        match args.op {
            FileOp::Read => {
                let text = self.read_text(path)?;
                let lines: Vec<&str> = text.lines().collect();
                let shown = &lines[..lines.len().min(self.params.max_read_lines)];
                let mut message = numbered(shown, 1);
                if shown.len() < lines.len() {
                    message.push_str(&format!(
                        "[showing {} of {} lines]\n",
                        shown.len(),
                        lines.len()
                    ));
                }
                if lines.is_empty() {
                    message = format!("[{path} is empty]");
                }
                let content = if shown.len() < lines.len() { shown.join("\n") + "\n" } else { text.clone() };
                Ok(ToolOutput::ok(json!({
                    "op": "read",
                    "path": path,
                    "content": content,
                    "total_lines": lines.len(),
                    "message": message,
                })))
            }
            FileOp::Write => {
                let content = args.content.ok_or_else(|| missing("write", "content"))?;
                self.workspace.file_upload(path, content.as_bytes())?;
                Ok(ToolOutput::ok(json!({
                    "op": "write",
                    "path": path,
                    "bytes_written": content.len(),
                    "message": format!("Wrote {} bytes to {path}", content.len()),
                })))
            }
            FileOp::Replace => {
                let old = args.old.ok_or_else(|| missing("replace", "old"))?;
                let new = args.new.ok_or_else(|| missing("replace", "new"))?;
                let text = self.read_text(path)?;
                let count = text.matches(old.as_str()).count();
                if count != 1 {
                    return Err(ToolError::AmbiguousReplace { count });
                }
                let updated = text.replacen(old.as_str(), &new, 1);
                self.workspace.file_upload(path, updated.as_bytes())?;
                Ok(ToolOutput::ok(json!({
                    "op": "replace",
                    "path": path,
                    "message": format!("Replaced 1 occurrence in {path}"),
                })))
            }
        }
    }
}
