use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub const ENV_PREFIX: &str = "AGENTRT_";
const CREDENTIAL_PREFIX: &str = "AGENTRT_CREDENTIAL_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid value for {name}: {reason}")]
    Env { name: String, reason: String },
    #[error("an API key is required (set api_key or AGENTRT_API_KEY)")]
    MissingApiKey,
}

/// Server settings. Read from a TOML file, then overridden by `AGENTRT_*`
/// environment variables.
#[derive(Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub api_key: Option<String>,
    /// Conversations live in `<root>/conversations/<id>`; `/execute` and
    /// `/files` without a conversation use `<root>/default`.
    pub workspace_root: PathBuf,
    pub max_body_bytes: usize,
    /// Frames buffered per stream subscriber before it is disconnected.
    pub stream_queue: usize,
    /// Named LLM API keys that agent configs refer to by `credential`.
    pub credentials: BTreeMap<String, String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8000)),
            api_key: None,
            workspace_root: PathBuf::from("workspace"),
            max_body_bytes: 16 * 1024 * 1024,
            stream_queue: 1024,
            credentials: BTreeMap::new(),
        }
    }
}

impl fmt::Debug for ServerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerConfig")
            .field("listen", &self.listen)
            .field("api_key", &self.api_key.as_ref().map(|_| agentrt::llm::REDACTED))
            .field("workspace_root", &self.workspace_root)
            .field("max_body_bytes", &self.max_body_bytes)
            .field("stream_queue", &self.stream_queue)
            .field("credentials", &self.credentials.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ServerConfig {
    pub fn new(api_key: impl Into<String>, workspace_root: impl Into<PathBuf>) -> Self {
        ServerConfig { api_key: Some(api_key.into()), workspace_root: workspace_root.into(), ..Self::default() }
    }

    pub fn with_listen(mut self, listen: SocketAddr) -> Self {
        self.listen = listen;
        self
    }

    pub fn with_max_body_bytes(mut self, bytes: usize) -> Self {
        self.max_body_bytes = bytes;
        self
    }

    pub fn with_stream_queue(mut self, frames: usize) -> Self {
        self.stream_queue = frames;
        self
    }

    pub fn with_credential(mut self, alias: impl Into<String>, key: impl Into<String>) -> Self {
        self.credentials.insert(alias.into(), key.into());
        self
    }

    /// File (if any) then process environment.
    pub fn load(file: Option<&Path>) -> Result<Self, ConfigError> {
        Self::from_sources(file, std::env::vars())
    }

    pub fn from_sources(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut config = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
                toml::from_str(&text)
                    .map_err(|e| ConfigError::Parse { path: path.display().to_string(), reason: e.to_string() })?
            }
            None => ServerConfig::default(),
        };
        for (name, value) in env {
            config.apply_env(&name, value)?;
        }
        Ok(config)
    }

    fn apply_env(&mut self, name: &str, value: String) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::Env { name: name.to_string(), reason: e.to_string() })
        }
        if let Some(alias) = name.strip_prefix(CREDENTIAL_PREFIX) {
            self.credentials.insert(alias.to_ascii_lowercase(), value);
            return Ok(());
        }
        match name.strip_prefix(ENV_PREFIX) {
            Some("LISTEN") => self.listen = parse(name, &value)?,
            Some("API_KEY") => self.api_key = Some(value),
            Some("WORKSPACE_ROOT") => self.workspace_root = PathBuf::from(value),
            Some("MAX_BODY_BYTES") => self.max_body_bytes = parse(name, &value)?,
            Some("STREAM_QUEUE") => self.stream_queue = parse(name, &value)?,
            _ => {}
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.api_key {
            Some(k) if !k.is_empty() => Ok(()),
            _ => Err(ConfigError::MissingApiKey),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(
            &path,
            "listen = \"0.0.0.0:9000\"\napi_key = \"from-file\"\nmax_body_bytes = 10\n[credentials]\nopenai = \"k1\"\n",
        )
        .unwrap();
        let config = ServerConfig::from_sources(
            Some(&path),
            env(&[("AGENTRT_API_KEY", "from-env"), ("AGENTRT_CREDENTIAL_ANTHROPIC", "k2"), ("HOME", "/root")]),
        )
        .unwrap();
        assert_eq!(config.listen.port(), 9000);
        assert_eq!(config.api_key.as_deref(), Some("from-env"));
        assert_eq!(config.max_body_bytes, 10);
        assert_eq!(config.credentials.get("openai").map(String::as_str), Some("k1"));
        assert_eq!(config.credentials.get("anthropic").map(String::as_str), Some("k2"));
    }

    #[test]
    fn bad_env_value_is_reported() {
        let err = ServerConfig::from_sources(None, env(&[("AGENTRT_MAX_BODY_BYTES", "lots")])).unwrap_err();
        assert!(err.to_string().contains("AGENTRT_MAX_BODY_BYTES"));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(&path, "lisen = \"x\"\n").unwrap();
        assert!(matches!(ServerConfig::from_sources(Some(&path), env(&[])), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn key_is_required_and_never_printed() {
        assert!(ServerConfig::default().validate().is_err());
        let config = ServerConfig::new("hunter2", "/tmp/w").with_credential("openai", "sk-live");
        config.validate().unwrap();
        let printed = format!("{config:?}");
        assert!(!printed.contains("hunter2") && !printed.contains("sk-live"));
    }
}
