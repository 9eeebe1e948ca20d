//! Event-sourced runtime for tool-using software agents.
//!
//! A conversation is an append-only log of immutable [`events::Event`]s plus a
//! small set of mutable metadata held in [`state::ConversationState`]. Every
//! other component (agent configuration, tools, LLM profiles) is immutable and
//! serializable, so a conversation can be persisted, resumed, or shipped to a
//! remote agent server and replayed there.
//!
//! The main entry points are:
//!
//! - [`conversation::Conversation`], which runs the agent loop either
//!   in-process or against a remote server with the same API;
//! - [`agent::AgentConfig`], the serializable agent description;
//! - [`workspace::Workspace`], the local or remote execution environment.

pub mod agent;
pub mod condenser;
pub mod conversation;
pub mod events;
pub mod llm;
pub mod secrets;
pub mod security;
pub mod state;
pub mod tools;
pub mod workspace;

pub use agent::{AgentConfig, AgentContext, Skill};
pub use conversation::{Conversation, ConversationError, LocalConversation, RemoteConversation};
pub use events::{Event, EventId, EventPayload, EventSource};
pub use llm::{LlmProfile, LlmRegistry, LlmSpec, Message};
pub use secrets::SecretRegistry;
pub use security::{ConfirmationPolicy, RiskLevel};
pub use state::{AgentStatus, ConversationState, ConversationStats, StateHandle};
pub use tools::{ToolDefinition, ToolRegistry, ToolSpec};
pub use workspace::Workspace;
