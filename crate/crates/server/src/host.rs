use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::http::StatusCode;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use agentrt::conversation::ConversationOptions;
use agentrt::workspace::LocalWorkspace;
use agentrt::{AgentConfig, ConfirmationPolicy, LlmRegistry, LocalConversation, ToolRegistry, Workspace};

use crate::config::ServerConfig;
use crate::error::ApiFailure;

const CONVERSATIONS_DIR: &str = "conversations";
const DEFAULT_DIR: &str = "default";
const RECORD_FILE: &str = "record.json";

/// Persisted next to each conversation so the server can reopen it after a
/// restart. The agent config is stored in its redacted form.
#[derive(Debug, Serialize, Deserialize)]
struct StoredRecord {
    id: String,
    created_at: DateTime<Utc>,
    agent: Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub agent: Value,
    #[serde(default)]
    pub confirmation_policy: Option<ConfirmationPolicy>,
    #[serde(default)]
    pub conversation_id: Option<String>,
}

pub struct Hosted {
    pub conversation: LocalConversation,
    pub created_at: DateTime<Utc>,
    /// Redacted agent config as serialized.
    pub agent: Value,
    pub root: PathBuf,
}

impl Hosted {
    pub fn id(&self) -> &str {
        self.conversation.id()
    }

    pub fn state_dir(&self) -> PathBuf {
        self.root.join("state")
    }

    pub fn working_dir(&self) -> PathBuf {
        self.conversation.workspace().working_dir().to_path_buf()
    }

    /// Base state fields plus server bookkeeping.
    pub fn record(&self) -> Result<Value, ApiFailure> {
        let base = self.conversation.base()?;
        let count = self.conversation.state().event_count().map_err(|e| ApiFailure::internal(e.to_string()))?;
        let mut record = serde_json::to_value(base).map_err(|e| ApiFailure::internal(e.to_string()))?;
        let object = record.as_object_mut().expect("base state is an object");
        object.insert("id".into(), Value::from(self.id()));
        object.insert("created_at".into(), serde_json::to_value(self.created_at).expect("timestamp"));
        object.insert("agent".into(), self.agent.clone());
        object.insert("persistence_dir".into(), Value::from(self.state_dir().display().to_string()));
        object.insert("working_dir".into(), Value::from(self.working_dir().display().to_string()));
        object.insert("event_count".into(), Value::from(count));
        object.insert("running".into(), Value::from(self.conversation.is_running()));
        Ok(record)
    }
}

/// Every conversation this server hosts.
pub struct Host {
    pub config: ServerConfig,
    llms: LlmRegistry,
    tools: ToolRegistry,
    conversations: RwLock<BTreeMap<String, Arc<Hosted>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn io_failure(path: &Path, e: std::io::Error) -> ApiFailure {
    ApiFailure::internal(format!("{}: {e}", path.display()))
}

impl Host {
    pub fn new(config: ServerConfig, llms: LlmRegistry, tools: ToolRegistry) -> std::io::Result<Self> {
        for (alias, key) in &config.credentials {
            llms.register_credential(alias.clone(), key.clone());
        }
        fs::create_dir_all(config.workspace_root.join(CONVERSATIONS_DIR))?;
        fs::create_dir_all(config.workspace_root.join(DEFAULT_DIR))?;
        let host = Host { config, llms, tools, conversations: RwLock::default() };
        host.reopen_existing();
        Ok(host)
    }

    fn conversations_dir(&self) -> PathBuf {
        self.config.workspace_root.join(CONVERSATIONS_DIR)
    }

    fn options(&self) -> ConversationOptions {
        ConversationOptions::default().with_llms(self.llms.clone()).with_tools(self.tools.clone())
    }

    fn reopen_existing(&self) {
        let Ok(entries) = fs::read_dir(self.conversations_dir()) else { return };
        for entry in entries.flatten() {
            let root = entry.path();
            match self.reopen(&root) {
                Ok(hosted) => {
                    let id = hosted.id().to_string();
                    self.conversations.write().unwrap_or_else(|p| p.into_inner()).insert(id, Arc::new(hosted));
                }
                Err(e) => log::warn!("skipping {}: {}", root.display(), e.message),
            }
        }
    }

    fn reopen(&self, root: &Path) -> Result<Hosted, ApiFailure> {
        let path = root.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
        let stored: StoredRecord = serde_json::from_str(&text).map_err(|e| ApiFailure::internal(e.to_string()))?;
        let config: AgentConfig =
            serde_json::from_value(stored.agent.clone()).map_err(|e| ApiFailure::internal(e.to_string()))?;
        let workspace = self.workspace_at(&root.join("workspace"))?;
        let conversation =
            LocalConversation::resume(config, Workspace::Local(workspace), &root.join("state"), self.options())?;
        Ok(Hosted { conversation, created_at: stored.created_at, agent: stored.agent, root: root.to_path_buf() })
    }

    fn workspace_at(&self, dir: &Path) -> Result<LocalWorkspace, ApiFailure> {
        LocalWorkspace::new(dir).map_err(|e| ApiFailure::internal(e.to_string()))
    }

    pub fn create(&self, request: CreateRequest) -> Result<Arc<Hosted>, ApiFailure> {
        let config: AgentConfig = serde_json::from_value(request.agent)
            .map_err(|e| ApiFailure::bad_request("invalid_config", format!("invalid agent config: {e}")))?;
        let id = match request.conversation_id {
            Some(id) if !valid_id(&id) => {
                return Err(ApiFailure::bad_request(
                    "invalid_input",
                    "conversation ids use 1-128 letters, digits, `-` or `_`",
                ))
            }
            Some(id) => id,
            None => uuid::Uuid::new_v4().simple().to_string(),
        };
        let mut conversations = self.conversations.write().unwrap_or_else(|p| p.into_inner());
        if conversations.contains_key(&id) {
            return Err(ApiFailure::new(StatusCode::CONFLICT, "conflict", format!("conversation {id} exists")));
        }
        let root = self.conversations_dir().join(&id);
        if root.exists() {
            return Err(ApiFailure::new(StatusCode::CONFLICT, "conflict", format!("conversation {id} exists")));
        }
        let built = self.build(&id, &root, config, request.confirmation_policy);
        let hosted = match built {
            Ok(h) => Arc::new(h),
            Err(e) => {
                let _ = fs::remove_dir_all(&root);
                return Err(e);
            }
        };
        conversations.insert(id.clone(), hosted.clone());
        log::info!("created conversation {id}");
        Ok(hosted)
    }

    fn build(
        &self,
        id: &str,
        root: &Path,
        config: AgentConfig,
        policy: Option<ConfirmationPolicy>,
    ) -> Result<Hosted, ApiFailure> {
        let workspace = self.workspace_at(&root.join("workspace"))?;
        let agent = serde_json::to_value(&config).map_err(|e| ApiFailure::internal(e.to_string()))?;
        let mut options = self.options().with_id(id).with_persistence_dir(root.join("state"));
        options.confirmation_policy = policy;
        let conversation = LocalConversation::new(config, Workspace::Local(workspace), options)?;
        let created_at = Utc::now();
        let stored = StoredRecord { id: id.to_string(), created_at, agent: agent.clone() };
        let path = root.join(RECORD_FILE);
        let text = serde_json::to_string_pretty(&stored).expect("record serializes");
        fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
        Ok(Hosted { conversation, created_at, agent, root: root.to_path_buf() })
    }

    pub fn get(&self, id: &str) -> Result<Arc<Hosted>, ApiFailure> {
        self.conversations
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiFailure::not_found(format!("no such conversation: {id}")))
    }

    pub fn list(&self) -> Vec<Arc<Hosted>> {
        let mut all: Vec<Arc<Hosted>> =
            self.conversations.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect();
        all.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id().cmp(b.id())));
        all
    }

    pub fn count(&self) -> usize {
        self.conversations.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    /// Unregisters the conversation; the caller stops it and removes files.
    pub fn remove(&self, id: &str) -> Result<Arc<Hosted>, ApiFailure> {
        self.conversations
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .remove(id)
            .ok_or_else(|| ApiFailure::not_found(format!("no such conversation: {id}")))
    }

    /// The conversation's working directory, or the shared default one.
    pub fn workspace_for(&self, conversation_id: Option<&str>) -> Result<LocalWorkspace, ApiFailure> {
        match conversation_id {
            Some(id) => {
                let hosted = self.get(id)?;
                self.workspace_at(&hosted.working_dir())
            }
            None => self.workspace_at(&self.config.workspace_root.join(DEFAULT_DIR)),
        }
    }
}
