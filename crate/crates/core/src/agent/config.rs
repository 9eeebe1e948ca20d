use serde::{Deserialize, Serialize};

use crate::condenser::CondenserPolicy;
use crate::llm::{LlmProfile, LlmSpec};
use crate::security::SecurityAnalyzer;
use crate::tools::ToolSpec;

/// Text-only instruction bundle. A skill without a trigger is always active;
/// one with keywords is activated by user messages mentioning any of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skill {
    pub name: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<Vec<String>>,
}

impl Skill {
    pub fn always(name: impl Into<String>, content: impl Into<String>) -> Self {
        Skill { name: name.into(), content: content.into(), trigger: None }
    }

    pub fn triggered(name: impl Into<String>, content: impl Into<String>, keywords: &[&str]) -> Self {
        Skill {
            name: name.into(),
            content: content.into(),
            trigger: Some(keywords.iter().map(|k| k.to_string()).collect()),
        }
    }

    pub fn is_always_active(&self) -> bool {
        self.trigger.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentContext {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt_prefix: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt_suffix: Option<String>,
    /// Prepended to every user message.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_message_prefix: Option<String>,
    pub skills: Vec<Skill>,
}

fn default_max_iterations() -> usize {
    100
}

fn default_stuck_window() -> usize {
    3
}

fn default_title_max_len() -> usize {
    60
}

/// Everything that defines an agent, as plain data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub llm: LlmSpec,
    #[serde(default, alias = "tools")]
    pub tool_specs: Vec<ToolSpec>,
    #[serde(default)]
    pub context: AgentContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub security_analyzer: Option<SecurityAnalyzer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condenser: Option<CondenserPolicy>,
    /// Bound on model calls per `run`.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Identical action/observation pairs (or errors) that count as stuck.
    #[serde(default = "default_stuck_window")]
    pub stuck_window: usize,
    /// A reply without a tool call leaves the conversation idle instead of
    /// finished.
    #[serde(default)]
    pub await_user_after_reply: bool,
    /// Model for conversation titles; without one the first user message is
    /// truncated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title_llm: Option<LlmProfile>,
    #[serde(default = "default_title_max_len")]
    pub title_max_len: usize,
}

impl AgentConfig {
    pub fn new(llm: impl Into<LlmSpec>) -> Self {
        AgentConfig {
            llm: llm.into(),
            tool_specs: Vec::new(),
            context: AgentContext::default(),
            security_analyzer: None,
            condenser: None,
            max_iterations: default_max_iterations(),
            stuck_window: default_stuck_window(),
            await_user_after_reply: false,
            title_llm: None,
            title_max_len: default_title_max_len(),
        }
    }

    pub fn with_tools<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tool_specs = names.into_iter().map(|n| ToolSpec::new(n)).collect();
        self
    }

    pub fn with_tool(mut self, spec: ToolSpec) -> Self {
        self.tool_specs.push(spec);
        self
    }

    pub fn with_context(mut self, context: AgentContext) -> Self {
        self.context = context;
        self
    }

    pub fn with_security_analyzer(mut self, analyzer: SecurityAnalyzer) -> Self {
        self.security_analyzer = Some(analyzer);
        self
    }

    pub fn with_condenser(mut self, policy: CondenserPolicy) -> Self {
        self.condenser = Some(policy);
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}
