//! Tools exposed by an MCP-style server.
//!
//! Only the schema translation and request shape are implemented: any
//! JSON-RPC-like `request(method, params)` function can back the tools.
//! [`FakeMcpServer`] is an in-process implementation for tests.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};

use super::{from_mcp_schema, Action, ToolDefinition, ToolError, ToolOutput, ToolRegistry};

pub trait McpTransport: Send + Sync {
    fn request(&self, method: &str, params: Value) -> Result<Value, String>;
}

impl<F> McpTransport for F
where
    F: Fn(&str, Value) -> Result<Value, String> + Send + Sync,
{
    fn request(&self, method: &str, params: Value) -> Result<Value, String> {
        self(method, params)
    }
}

fn render(output: &ToolOutput) -> String {
    let parts: Vec<String> = output.result["content"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|part| match part["type"].as_str() {
            Some("text") => part["text"].as_str().unwrap_or_default().to_string(),
            Some(other) => format!("[{other} content]"),
            None => part.to_string(),
        })
        .collect();
    parts.join("\n")
}

/// Builds one tool from an entry of a `tools/list` result.
pub fn tool_from_listing(entry: &Value, transport: Arc<dyn McpTransport>) -> Result<ToolDefinition, ToolError> {
    let name = entry["name"].as_str().ok_or_else(|| ToolError::Execution("tool listing without a name".into()))?;
    let description = entry["description"].as_str().unwrap_or_default();
    let schema = entry.get("inputSchema").cloned().unwrap_or_else(|| json!({"type": "object"}));
    let validator = from_mcp_schema(name, &schema)?;
    let tool_name = name.to_string();
    let executor = move |action: &Action| -> Result<ToolOutput, ToolError> {
        let reply = transport
            .request("tools/call", json!({"name": tool_name, "arguments": action.arguments()}))
            .map_err(ToolError::Execution)?;
        let is_error = reply["isError"].as_bool().unwrap_or(false);
        Ok(ToolOutput { result: reply, is_error })
    };
    Ok(ToolDefinition::new(name, description, &validator.to_json(), Arc::new(executor))?.with_renderer(render))
}

/// Lists the server's tools and translates each one. A tool with an
/// unsupported schema fails the whole listing.
pub fn list_tools(transport: Arc<dyn McpTransport>) -> Result<Vec<ToolDefinition>, ToolError> {
    let listing = transport.request("tools/list", json!({})).map_err(ToolError::Execution)?;
    listing["tools"]
        .as_array()
        .ok_or_else(|| ToolError::Execution("tools/list reply has no `tools` array".into()))?
        .iter()
        .map(|entry| tool_from_listing(entry, Arc::clone(&transport)))
        .collect()
}

/// Registers every tool of an MCP server in `registry` and returns their
/// names.
pub fn register_mcp_tools(registry: &ToolRegistry, transport: Arc<dyn McpTransport>) -> Result<Vec<String>, ToolError> {
    let tools = list_tools(transport)?;
    let names = tools.iter().map(|t| t.name().to_string()).collect();
    for tool in tools {
        registry.register_definition(tool)?;
    }
    Ok(names)
}

type Handler = Arc<dyn Fn(&Value) -> Result<String, String> + Send + Sync>;

/// In-process MCP server: a fixed tool list with closure handlers.
#[derive(Clone, Default)]
pub struct FakeMcpServer {
    tools: BTreeMap<String, (Value, Handler)>,
}

impl FakeMcpServer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tool; the handler's `Ok` text becomes a text content part,
    /// `Err` text is returned with `isError: true`.
    pub fn with_tool(
        mut self,
        name: &str,
        description: &str,
        input_schema: Value,
        handler: impl Fn(&Value) -> Result<String, String> + Send + Sync + 'static,
    ) -> Self {
        let listing = json!({"name": name, "description": description, "inputSchema": input_schema});
        self.tools.insert(name.to_string(), (listing, Arc::new(handler)));
        self
    }
}

impl McpTransport for FakeMcpServer {
    fn request(&self, method: &str, params: Value) -> Result<Value, String> {
        match method {
            "tools/list" => Ok(json!({"tools": self.tools.values().map(|(l, _)| l.clone()).collect::<Vec<_>>()})),
            "tools/call" => {
                let name = params["name"].as_str().ok_or("missing tool name")?;
                let (_, handler) = self.tools.get(name).ok_or_else(|| format!("unknown tool {name}"))?;
                let (text, is_error) = match handler(&params["arguments"]) {
                    Ok(t) => (t, false),
                    Err(t) => (t, true),
                };
                Ok(json!({"content": [{"type": "text", "text": text}], "isError": is_error}))
            }
            other => Err(format!("method not found: {other}")),
        }
    }
}
