//! The typed tool contract.
//!
//! A [`ToolDefinition`] pairs an argument schema with an executor. Raw model
//! arguments only reach the executor as an [`Action`], and the only way to
//! obtain an `Action` is [`validate_action`]. Tools cross process boundaries
//! as a [`ToolSpec`] (a registered name plus JSON parameters) and are rebuilt
//! on the other side by a [`ToolRegistry`].

mod bash;
mod delegate;
mod file_editor;
mod finish;
pub mod mcp;
mod schema;
mod truncate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};

use crate::llm::ToolSchema;
use crate::secrets::SecretRegistry;
use crate::workspace::{Workspace, WorkspaceError};

pub use bash::{BashArgs, BashParams, BashTool};
pub use delegate::{ChildReport, ChildSpawner, DelegateArgs, DelegateParams};
pub use file_editor::{FileEditorArgs, FileEditorParams, FileOp};
pub use finish::FinishArgs;
pub use schema::{SchemaValidator, SchemaViolation, UnsupportedSchemaFeature, ROOT_PATH};
pub use truncate::truncate_middle;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("unknown tool `{name}`; available tools: {}", available.join(", "))]
    UnknownTool { name: String, available: Vec<String> },
    #[error("could not build tool `{name}`: {reason}")]
    ResolverFailure { name: String, reason: String },
    #[error("invalid arguments for `{tool}`: {violation}")]
    SchemaViolation { tool: String, violation: SchemaViolation },
    #[error(transparent)]
    UnsupportedSchemaFeature(#[from] UnsupportedSchemaFeature),
    #[error("invalid tool name `{0}`: use 1-64 letters, digits, `_` or `-`")]
    InvalidName(String),
    #[error("failed to start command: {0}")]
    SpawnFailure(String),
    #[error("path escapes the workspace: {0}")]
    PathEscape(String),
    #[error("no such file: {0}")]
    NotFound(String),
    #[error("`old` must occur exactly once, found {count} occurrences")]
    AmbiguousReplace { count: usize },
    #[error("{0}")]
    Execution(String),
}

impl From<WorkspaceError> for ToolError {
    fn from(e: WorkspaceError) -> Self {
        match e {
            WorkspaceError::PathEscape(p) => ToolError::PathEscape(p),
            WorkspaceError::NotFound(p) => ToolError::NotFound(p),
            WorkspaceError::Spawn(m) => ToolError::SpawnFailure(m),
            other => ToolError::Execution(other.to_string()),
        }
    }
}

/// Tool names follow the chat-completions function-name rule.
pub fn is_valid_tool_name(name: &str) -> bool {
    (1..=64).contains(&name.len()) && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Validated arguments for one tool.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    tool_name: String,
    arguments: Value,
}

impl Action {
    pub fn tool_name(&self) -> &str {
        &self.tool_name
    }

    pub fn arguments(&self) -> &Value {
        &self.arguments
    }
}

/// What an executor returns; the definition renders `llm_text` from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub result: Value,
    pub is_error: bool,
}

impl ToolOutput {
    pub fn ok(result: Value) -> Self {
        ToolOutput { result, is_error: false }
    }

    pub fn error(result: Value) -> Self {
        ToolOutput { result, is_error: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tool_name: String,
    pub result: Value,
    pub is_error: bool,
    pub llm_text: String,
}

pub trait ToolExecutor: Send + Sync {
    fn execute(&self, action: &Action) -> Result<ToolOutput, ToolError>;
}

impl<F> ToolExecutor for F
where
    F: Fn(&Action) -> Result<ToolOutput, ToolError> + Send + Sync,
{
    fn execute(&self, action: &Action) -> Result<ToolOutput, ToolError> {
        self(action)
    }
}

pub type ObservationRenderer = Arc<dyn Fn(&ToolOutput) -> String + Send + Sync>;

/// Default rendering: strings verbatim, anything else as compact JSON.
pub fn render_plain(output: &ToolOutput) -> String {
    match &output.result {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Clone)]
pub struct ToolDefinition {
    name: String,
    description: String,
    validator: SchemaValidator,
    executor: Arc<dyn ToolExecutor>,
    renderer: ObservationRenderer,
    terminal: bool,
}

impl fmt::Debug for ToolDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolDefinition").field("name", &self.name).finish_non_exhaustive()
    }
}

impl ToolDefinition {
    /// Builds a tool; the name must be a valid identifier and the schema
    /// must compile.
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        action_schema: &Value,
        executor: Arc<dyn ToolExecutor>,
    ) -> Result<Self, ToolError> {
        let name = name.into();
        if !is_valid_tool_name(&name) {
            return Err(ToolError::InvalidName(name));
        }
        Ok(ToolDefinition {
            name,
            description: description.into(),
            validator: SchemaValidator::compile(action_schema)?,
            executor,
            renderer: Arc::new(render_plain),
            terminal: false,
        })
    }

    pub fn with_renderer(mut self, renderer: impl Fn(&ToolOutput) -> String + Send + Sync + 'static) -> Self {
        self.renderer = Arc::new(renderer);
        self
    }

    /// Marks the tool as ending the run when it succeeds.
    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn action_schema(&self) -> Value {
        self.validator.to_json()
    }

    pub fn validator(&self) -> &SchemaValidator {
        &self.validator
    }

    pub fn to_schema(&self) -> ToolSchema {
        ToolSchema { name: self.name.clone(), description: self.description.clone(), parameters: self.action_schema() }
    }

    /// Chat-completions function-tool envelope.
    pub fn to_chat_tool(&self) -> Value {
        self.to_schema().to_chat_tool()
    }

    /// Runs a validated action. `llm_text` is never empty.
    pub fn execute(&self, action: &Action) -> Result<Observation, ToolError> {
        debug_assert_eq!(action.tool_name, self.name);
        let output = self.executor.execute(action)?;
        let mut llm_text = (self.renderer)(&output);
        if llm_text.is_empty() {
            llm_text = if output.is_error { "[error with no output]" } else { "[no output]" }.to_string();
        }
        Ok(Observation { tool_name: self.name.clone(), result: output.result, is_error: output.is_error, llm_text })
    }
}

pub fn validate_action(tool: &ToolDefinition, raw_args: &Value) -> Result<Action, ToolError> {
    tool.validator
        .validate(raw_args)
        .map_err(|violation| ToolError::SchemaViolation { tool: tool.name.clone(), violation })?;
    Ok(Action { tool_name: tool.name.clone(), arguments: raw_args.clone() })
}

/// `{name, description, inputSchema}` as listed by an MCP server.
pub fn to_mcp_schema(tool: &ToolDefinition) -> Value {
    json!({"name": tool.name, "description": tool.description, "inputSchema": tool.action_schema()})
}

/// Compiles an MCP input schema into an argument validator.
pub fn from_mcp_schema(name: &str, schema: &Value) -> Result<SchemaValidator, ToolError> {
    if !is_valid_tool_name(name) {
        return Err(ToolError::InvalidName(name.to_string()));
    }
    Ok(SchemaValidator::compile(schema)?)
}

/// Serializable reference to a registered tool. Deserializes from a bare
/// name as well as `{name, params}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>) -> Self {
        ToolSpec { name: name.into(), params: json!({}) }
    }

    pub fn with_params(name: impl Into<String>, params: Value) -> Self {
        ToolSpec { name: name.into(), params }
    }
}

impl<'de> Deserialize<'de> for ToolSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Full {
            name: String,
            #[serde(default)]
            params: Option<Value>,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Full(Full),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Name(name) => Ok(ToolSpec::new(name)),
            Repr::Full(f) => Ok(ToolSpec { name: f.name, params: f.params.unwrap_or_else(|| json!({})) }),
        }
    }
}

/// Everything a resolver may bind a tool to.
#[derive(Clone)]
pub struct ToolContext {
    pub working_dir: PathBuf,
    pub secrets: SecretRegistry,
    pub workspace: Workspace,
    /// Runs one child conversation; present when delegation is possible.
    pub spawner: Option<ChildSpawner>,
}

impl fmt::Debug for ToolContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolContext").field("working_dir", &self.working_dir).finish_non_exhaustive()
    }
}

impl ToolContext {
    pub fn new(workspace: Workspace, secrets: SecretRegistry) -> Self {
        ToolContext { working_dir: workspace.working_dir().to_path_buf(), secrets, workspace, spawner: None }
    }
}

pub type Resolver = Arc<dyn Fn(&Value, &ToolContext) -> Result<ToolDefinition, String> + Send + Sync>;

/// Name to resolver table. Clones share the table.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    resolvers: Arc<RwLock<BTreeMap<String, Resolver>>>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry with `bash`, `file_editor`, `finish` and `delegate`.
    pub fn with_builtins() -> Self {
        let registry = Self::new();
        registry.register_tool("bash", bash::resolve).expect("valid name");
        registry.register_tool("file_editor", file_editor::resolve).expect("valid name");
        registry.register_tool("finish", finish::resolve).expect("valid name");
        registry.register_tool("delegate", delegate::resolve).expect("valid name");
        registry
    }

    /// Registers (or replaces) a resolver.
    pub fn register_tool(
        &self,
        name: impl Into<String>,
        resolver: impl Fn(&Value, &ToolContext) -> Result<ToolDefinition, String> + Send + Sync + 'static,
    ) -> Result<(), ToolError> {
        let name = name.into();
        if !is_valid_tool_name(&name) {
            return Err(ToolError::InvalidName(name));
        }
        self.resolvers.write().unwrap_or_else(|p| p.into_inner()).insert(name, Arc::new(resolver));
        Ok(())
    }

    /// Registers a fixed, already-built tool under its own name.
    pub fn register_definition(&self, tool: ToolDefinition) -> Result<(), ToolError> {
        let name = tool.name().to_string();
        self.register_tool(name, move |_, _| Ok(tool.clone()))
    }

    pub fn names(&self) -> Vec<String> {
        self.resolvers.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.resolvers.read().unwrap_or_else(|p| p.into_inner()).contains_key(name)
    }

    pub fn resolve(&self, spec: &ToolSpec, context: &ToolContext) -> Result<ToolDefinition, ToolError> {
        let resolver = self
            .resolvers
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&spec.name)
            .cloned()
            .ok_or_else(|| ToolError::UnknownTool { name: spec.name.clone(), available: self.names() })?;
        let tool = resolver(&spec.params, context)
            .map_err(|reason| ToolError::ResolverFailure { name: spec.name.clone(), reason })?;
        if tool.name() != spec.name {
            return Err(ToolError::ResolverFailure {
                name: spec.name.clone(),
                reason: format!("resolver produced a tool named `{}`", tool.name()),
            });
        }
        Ok(tool)
    }

    pub fn resolve_all(&self, specs: &[ToolSpec], context: &ToolContext) -> Result<Vec<ToolDefinition>, ToolError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(specs.len());
        for spec in specs {
            if !seen.insert(spec.name.as_str()) {
                return Err(ToolError::ResolverFailure { name: spec.name.clone(), reason: "listed twice".into() });
            }
            out.push(self.resolve(spec, context)?);
        }
        Ok(out)
    }
}

/// Parses typed arguments with serde, rejecting `null` anywhere (the schema
/// form never admits `null`).
fn parse_typed<T: serde::de::DeserializeOwned>(raw: &Value) -> Result<T, String> {
    fn has_null(v: &Value) -> bool {
        match v {
            Value::Null => true,
            Value::Array(items) => items.iter().any(has_null),
            Value::Object(map) => map.values().any(has_null),
            _ => false,
        }
    }
    if has_null(raw) {
        return Err("null is not allowed".into());
    }
    serde_json::from_value(raw.clone()).map_err(|e| e.to_string())
}
