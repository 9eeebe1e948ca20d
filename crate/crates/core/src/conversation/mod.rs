//! Conversations: the run loop around the agent, in-process or on a server.
//!
//! [`Conversation::new`] picks the variant from the workspace: a local
//! workspace gives a [`LocalConversation`], a remote one a
//! [`RemoteConversation`] that drives the same loop inside an agent server.
//! Both expose the same operations.

mod local;
mod remote;

use std::collections::BTreeMap;
use std::path::PathBuf;

pub use local::LocalConversation;
pub use remote::{RemoteConversation, RemoteSubscription};

use crate::agent::AgentConfig;
use crate::events::{ContentPart, Event};
use crate::llm::LlmRegistry;
use crate::secrets::{SecretRegistry, SecretSource};
use crate::security::{ConfirmationDecision, ConfirmationPolicy};
use crate::state::{AgentStatus, BaseState, StateError, SubscriptionId};
use crate::tools::ToolRegistry;
use crate::workspace::{Workspace, WorkspaceError};

#[derive(Debug, thiserror::Error)]
pub enum ConversationError {
    #[error("the conversation is already running")]
    AlreadyRunning,
    #[error("no action is waiting for confirmation")]
    NoPendingAction,
    #[error("agent server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no such conversation: {0}")]
    NotFound(String),
    #[error("server returned HTTP {status}: {body}")]
    Server { status: u16, body: String },
    #[error("timed out waiting for the conversation")]
    Timeout,
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// Optional wiring for a new conversation.
#[derive(Clone, Default)]
pub struct ConversationOptions {
    pub conversation_id: Option<String>,
    /// Directory for the event files and base state; in-memory when absent.
    pub persistence_dir: Option<PathBuf>,
    /// Model backends and credentials; the HTTP client when absent.
    pub llms: Option<LlmRegistry>,
    /// Tool resolvers; the built-in tools when absent.
    pub tools: Option<ToolRegistry>,
    pub secrets: Option<SecretRegistry>,
    pub confirmation_policy: Option<ConfirmationPolicy>,
}

impl ConversationOptions {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.conversation_id = Some(id.into());
        self
    }

    pub fn with_persistence_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.persistence_dir = Some(dir.into());
        self
    }

    pub fn with_llms(mut self, llms: LlmRegistry) -> Self {
        self.llms = Some(llms);
        self
    }

    pub fn with_tools(mut self, tools: ToolRegistry) -> Self {
        self.tools = Some(tools);
        self
    }

    pub fn with_secrets(mut self, secrets: SecretRegistry) -> Self {
        self.secrets = Some(secrets);
        self
    }

    pub fn with_confirmation_policy(mut self, policy: ConfirmationPolicy) -> Self {
        self.confirmation_policy = Some(policy);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subscription {
    Local(SubscriptionId),
    Remote(RemoteSubscription),
}

#[derive(Debug, Clone)]
pub enum Conversation {
    Local(LocalConversation),
    Remote(RemoteConversation),
}

impl Conversation {
    pub fn new(config: AgentConfig, workspace: impl Into<Workspace>) -> Result<Self, ConversationError> {
        Self::with_options(config, workspace, ConversationOptions::default())
    }

    /// Local for a local workspace, remote (created on the server) for a
    /// remote one.
    pub fn with_options(
        config: AgentConfig,
        workspace: impl Into<Workspace>,
        options: ConversationOptions,
    ) -> Result<Self, ConversationError> {
        match workspace.into() {
            Workspace::Remote(remote) => Ok(Conversation::Remote(RemoteConversation::create(config, remote, options)?)),
            local => Ok(Conversation::Local(LocalConversation::new(config, local, options)?)),
        }
    }

    /// A local conversation in `path` (created if missing).
    pub fn at_path(config: AgentConfig, path: impl Into<PathBuf>) -> Result<Self, ConversationError> {
        let workspace = Workspace::local(path.into())?;
        Self::new(config, workspace)
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, Conversation::Remote(_))
    }

    pub fn id(&self) -> &str {
        match self {
            Conversation::Local(c) => c.id(),
            Conversation::Remote(c) => c.id(),
        }
    }

    pub fn send_message(&self, text: impl Into<String>) -> Result<(), ConversationError> {
        self.send_content(vec![ContentPart::text(text)])
    }

    pub fn send_content(&self, content: Vec<ContentPart>) -> Result<(), ConversationError> {
        match self {
            Conversation::Local(c) => c.send_content(content),
            Conversation::Remote(c) => c.send_content(content),
        }
    }

    pub fn run(&self) -> Result<AgentStatus, ConversationError> {
        match self {
            Conversation::Local(c) => c.run(),
            Conversation::Remote(c) => c.run(),
        }
    }

    pub fn pause(&self) -> Result<(), ConversationError> {
        match self {
            Conversation::Local(c) => {
                c.pause();
                Ok(())
            }
            Conversation::Remote(c) => c.pause(),
        }
    }

    pub fn confirm(&self, decision: ConfirmationDecision, note: Option<String>) -> Result<AgentStatus, ConversationError> {
        match self {
            Conversation::Local(c) => c.confirm(decision, note),
            Conversation::Remote(c) => c.confirm(decision, note),
        }
    }

    pub fn set_confirmation_policy(&self, policy: ConfirmationPolicy) -> Result<(), ConversationError> {
        match self {
            Conversation::Local(c) => c.set_confirmation_policy(policy),
            Conversation::Remote(c) => c.set_confirmation_policy(policy),
        }
    }

    /// Values only travel to a remote server as plain strings; callables stay
    /// local.
    pub fn update_secrets(&self, patch: BTreeMap<String, String>) -> Result<(), ConversationError> {
        match self {
            Conversation::Local(c) => {
                c.update_secrets(patch.into_iter().map(|(k, v)| (k, SecretSource::from(v))).collect());
                Ok(())
            }
            Conversation::Remote(c) => c.update_secrets(&patch),
        }
    }

    pub fn status(&self) -> Result<AgentStatus, ConversationError> {
        match self {
            Conversation::Local(c) => c.status(),
            Conversation::Remote(c) => c.status(),
        }
    }

    pub fn base(&self) -> Result<BaseState, ConversationError> {
        match self {
            Conversation::Local(c) => c.base(),
            Conversation::Remote(c) => c.base(),
        }
    }

    pub fn events(&self) -> Result<Vec<Event>, ConversationError> {
        match self {
            Conversation::Local(c) => c.events(),
            Conversation::Remote(c) => c.events(),
        }
    }

    /// `callback` receives `(index, event)` for every event appended from
    /// now on, in order.
    pub fn subscribe(&self, callback: impl Fn(usize, &Event) + Send + Sync + 'static) -> Subscription {
        match self {
            Conversation::Local(c) => Subscription::Local(c.subscribe(callback)),
            Conversation::Remote(c) => Subscription::Remote(c.subscribe(callback)),
        }
    }

    pub fn unsubscribe(&self, subscription: Subscription) {
        match (self, subscription) {
            (Conversation::Local(c), Subscription::Local(id)) => c.unsubscribe(id),
            (Conversation::Remote(c), Subscription::Remote(id)) => c.unsubscribe(id),
            _ => {}
        }
    }

    /// Releases the conversation; a remote one is deleted on the server if
    /// this handle created it.
    pub fn close(&self) -> Result<(), ConversationError> {
        match self {
            Conversation::Local(_) => Ok(()),
            Conversation::Remote(c) => c.close(),
        }
    }
}

#[cfg(test)]
mod tests;
