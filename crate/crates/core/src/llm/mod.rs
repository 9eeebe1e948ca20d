//! Provider-neutral LLM interface.
//!
//! An [`LlmSpec`] is pure configuration: either one [`LlmProfile`] or a router
//! over several named profiles. An [`LlmRegistry`] turns a spec into a live
//! [`LanguageModel`] by binding each profile to a [`ChatBackend`]: the HTTP
//! chat-completions client by default, or any backend registered under the
//! profile's model name (this is how the scripted test provider is wired in).
//!
//! Profiles with `native_tool_calling = false` go through the prompt-based
//! tool-calling path in [`nonnative`] transparently.

mod chat;
mod message;
pub mod nonnative;
mod router;
mod scripted;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::state::ConversationStats;

pub use chat::{parse_chat_response, serialize_messages, serialize_request, ChatCompletionsBackend, TIMEOUT_ENV};
pub use message::{Message, Role, ToolCall};
pub use router::{select_llm, MultimodalRouter, RouteSelector, RouterKind, RouterLlm, RouterSpec};
pub use scripted::{ScriptedBackend, ScriptedReply};

/// Placeholder emitted wherever a secret value would be serialized.
pub const REDACTED: &str = "**********";

/// A string whose value never appears in `Debug` output or serialized form.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretString(String);

impl SecretString {
    pub fn new(value: impl Into<String>) -> Self {
        SecretString(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for SecretString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(REDACTED)
    }
}

mod redacted_key {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Option<SecretString>, serializer: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(_) => serializer.serialize_str(REDACTED),
            None => serializer.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<SecretString>, D::Error> {
        let raw = Option::<String>::deserialize(deserializer)?;
        Ok(raw.filter(|v| v != REDACTED && !v.is_empty()).map(SecretString))
    }
}

/// USD rates per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsagePricing {
    pub prompt_per_million: f64,
    pub completion_per_million: f64,
}

/// Immutable model configuration. The API key is write-only: it is never
/// serialized and prints as a placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmProfile {
    /// Provider-qualified model name, e.g. `openai/gpt-4o`.
    pub model: String,
    #[serde(default, with = "redacted_key", skip_serializing_if = "Option::is_none")]
    pub api_key: Option<SecretString>,
    /// Name of a credential held by the agent server, used instead of
    /// shipping `api_key` over the wire.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_true")]
    pub native_tool_calling: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_pricing: Option<UsagePricing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

fn default_true() -> bool {
    true
}

impl LlmProfile {
    pub fn new(model: impl Into<String>) -> Self {
        LlmProfile {
            model: model.into(),
            api_key: None,
            credential: None,
            base_url: None,
            temperature: None,
            native_tool_calling: true,
            usage_pricing: None,
            timeout_secs: None,
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(SecretString::new(key));
        self
    }

    pub fn with_native_tool_calling(mut self, native: bool) -> Self {
        self.native_tool_calling = native;
        self
    }

    pub fn with_pricing(mut self, prompt_per_million: f64, completion_per_million: f64) -> Self {
        self.usage_pricing = Some(UsagePricing { prompt_per_million, completion_per_million });
        self
    }
}

/// The `llm` field of an agent: one profile or a router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LlmSpec {
    Router(RouterSpec),
    Single(LlmProfile),
}

impl LlmSpec {
    /// Profile used for auxiliary calls (titles, summaries) by default.
    pub fn default_profile(&self) -> &LlmProfile {
        match self {
            LlmSpec::Single(p) => p,
            LlmSpec::Router(r) => r
                .llms_for_routing
                .get("primary")
                .or_else(|| r.llms_for_routing.values().next())
                .expect("router has at least one profile"),
        }
    }

    pub fn profiles_mut(&mut self) -> Vec<&mut LlmProfile> {
        match self {
            LlmSpec::Single(p) => vec![p],
            LlmSpec::Router(r) => r.llms_for_routing.values_mut().collect(),
        }
    }
}

impl From<LlmProfile> for LlmSpec {
    fn from(p: LlmProfile) -> Self {
        LlmSpec::Single(p)
    }
}

/// Provider-neutral tool description passed to a completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

impl ToolSchema {
    /// Chat-completions function-tool envelope.
    pub fn to_chat_tool(&self) -> Value {
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub message: Message,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub raw_finish_reason: String,
}

impl LlmResponse {
    pub fn text(text: impl Into<String>) -> Self {
        LlmResponse {
            message: Message::assistant(text),
            usage: Usage::default(),
            raw_finish_reason: "stop".into(),
        }
    }

    pub fn tool_call(id: impl Into<String>, name: impl Into<String>, arguments: Value) -> Self {
        Self::tool_call_with_thought(None::<String>, id, name, arguments)
    }

    pub fn tool_call_with_thought(
        thought: Option<impl Into<String>>,
        id: impl Into<String>,
        name: impl Into<String>,
        arguments: Value,
    ) -> Self {
        let mut message = match thought {
            Some(t) => Message::assistant(t),
            None => Message { content: Vec::new(), ..Message::assistant("") },
        };
        message.tool_calls.push(ToolCall { id: id.into(), name: name.into(), arguments });
        LlmResponse { message, usage: Usage::default(), raw_finish_reason: "tool_calls".into() }
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Usage { prompt_tokens, completion_tokens };
        self
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("provider returned HTTP {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("request timed out")]
    Timeout,
    #[error("router selected unknown key `{0}`")]
    UnknownRouteKey(String),
    #[error("tool call block is not valid JSON: {0}")]
    InvalidToolJson(String),
    #[error("scripted provider exhausted after {0} replies")]
    ScriptExhausted(usize),
}

impl LlmError {
    /// Errors the model can recover from on its next turn.
    pub fn is_model_recoverable(&self) -> bool {
        matches!(self, LlmError::InvalidToolJson(_))
    }
}

/// Messages and tool schemas as handed to a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSchema>,
}

/// Something that can answer a chat request for a profile.
pub trait ChatBackend: Send + Sync {
    fn send(&self, profile: &LlmProfile, request: &ChatRequest) -> Result<LlmResponse, LlmError>;
}

/// A completed call plus the profile that served it (for cost accounting).
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: LlmResponse,
    pub profile: LlmProfile,
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<Completion, LlmError>;
}

/// A single profile bound to its backend.
pub struct ProfileLlm {
    profile: LlmProfile,
    backend: Arc<dyn ChatBackend>,
}

impl ProfileLlm {
    pub fn new(profile: LlmProfile, backend: Arc<dyn ChatBackend>) -> Self {
        ProfileLlm { profile, backend }
    }

    pub fn profile(&self) -> &LlmProfile {
        &self.profile
    }
}

impl LanguageModel for ProfileLlm {
    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<Completion, LlmError> {
        complete(&self.profile, self.backend.as_ref(), messages, tools)
            .map(|response| Completion { response, profile: self.profile.clone() })
    }
}

/// One completion against a profile. Native profiles receive the tool
/// schemas in the request's tool field; others get the prompt-based path.
pub fn complete(
    profile: &LlmProfile,
    backend: &dyn ChatBackend,
    messages: &[Message],
    tools: &[ToolSchema],
) -> Result<LlmResponse, LlmError> {
    if messages.is_empty() {
        return Err(LlmError::MalformedResponse("completion requires at least one message".into()));
    }
    if profile.native_tool_calling || tools.is_empty() {
        let request = ChatRequest { messages: messages.to_vec(), tools: tools.to_vec() };
        return backend.send(profile, &request);
    }
    let request = ChatRequest { messages: nonnative::rewrite_messages(messages, tools), tools: Vec::new() };
    let mut response = backend.send(profile, &request)?;
    let text = response.message.text_content();
    let (thought, call) = nonnative::parse_nonnative_reply(&text)?;
    let mut message = match thought.is_empty() {
        true => Message { content: Vec::new(), ..Message::assistant("") },
        false => Message::assistant(thought),
    };
    if let Some(call) = call {
        message.tool_calls.push(call);
    } else if message.content.is_empty() {
        message = Message::assistant(text);
    }
    response.message = message;
    Ok(response)
}

/// Maps model names to backends. Unregistered models use the HTTP
/// chat-completions client.
#[derive(Clone)]
pub struct LlmRegistry {
    backends: Arc<RwLock<HashMap<String, Arc<dyn ChatBackend>>>>,
    default_backend: Arc<dyn ChatBackend>,
    credentials: Arc<RwLock<HashMap<String, SecretString>>>,
}

impl Default for LlmRegistry {
    fn default() -> Self {
        LlmRegistry {
            backends: Arc::default(),
            default_backend: Arc::new(ChatCompletionsBackend::default()),
            credentials: Arc::default(),
        }
    }
}

impl LlmRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_backend(&self, model: impl Into<String>, backend: Arc<dyn ChatBackend>) {
        self.backends.write().unwrap_or_else(|p| p.into_inner()).insert(model.into(), backend);
    }

    /// Registers a named credential resolved for profiles whose
    /// `credential` field names it.
    pub fn register_credential(&self, alias: impl Into<String>, key: impl Into<String>) {
        self.credentials
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(alias.into(), SecretString::new(key));
    }

    pub fn backend_for(&self, model: &str) -> Arc<dyn ChatBackend> {
        self.backends
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(model)
            .cloned()
            .unwrap_or_else(|| Arc::clone(&self.default_backend))
    }

    fn resolve_profile(&self, profile: &LlmProfile) -> LlmProfile {
        let mut profile = profile.clone();
        if profile.api_key.is_none() {
            if let Some(alias) = &profile.credential {
                profile.api_key = self.credentials.read().unwrap_or_else(|p| p.into_inner()).get(alias).cloned();
            }
        }
        profile
    }

    pub fn bind_profile(&self, profile: &LlmProfile) -> ProfileLlm {
        let profile = self.resolve_profile(profile);
        let backend = self.backend_for(&profile.model);
        ProfileLlm::new(profile, backend)
    }

    pub fn build(&self, spec: &LlmSpec) -> Arc<dyn LanguageModel> {
        match spec {
            LlmSpec::Single(p) => Arc::new(self.bind_profile(p)),
            LlmSpec::Router(r) => {
                let routes: BTreeMap<String, ProfileLlm> =
                    r.llms_for_routing.iter().map(|(k, p)| (k.clone(), self.bind_profile(p))).collect();
                Arc::new(RouterLlm::new(r.router.selector(), routes))
            }
        }
    }
}

/// Folds one response's usage into the running stats.
pub fn record_usage(stats: ConversationStats, response: &LlmResponse, profile: &LlmProfile) -> ConversationStats {
    let mut next = stats;
    next.prompt_tokens += response.usage.prompt_tokens;
    next.completion_tokens += response.usage.completion_tokens;
    next.llm_calls += 1;
    if let Some(p) = &profile.usage_pricing {
        next.total_cost += (response.usage.prompt_tokens as f64 * p.prompt_per_million
            + response.usage.completion_tokens as f64 * p.completion_per_million)
            / 1_000_000.0;
    }
    next
}
