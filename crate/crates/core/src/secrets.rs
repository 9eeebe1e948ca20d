//! Per-conversation secret registry.
//!
//! Secrets are late-bound: a command is scanned for registered names, and only
//! the names it mentions are resolved and exported to the child process.
//! Every value ever resolved (or registered statically) in the conversation
//! is masked as `<secret-hidden>` in tool output, including values that
//! were later rotated out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Serialize, Serializer};

use crate::llm::REDACTED;

pub const SECRET_MASK: &str = "<secret-hidden>";

/// Values shorter than this are never masked.
pub const MIN_MASKED_LEN: usize = 4;

type Provider = Arc<dyn Fn() -> Result<String, String> + Send + Sync>;

#[derive(Clone)]
pub enum SecretSource {
    Static(String),
    /// Invoked each time a command references the secret.
    Callable(Provider),
}

impl SecretSource {
    pub fn callable(provider: impl Fn() -> Result<String, String> + Send + Sync + 'static) -> Self {
        SecretSource::Callable(Arc::new(provider))
    }

    /// A source fetching the value with an HTTP GET; the response body
    /// (trimmed) is the secret.
    pub fn http(url: impl Into<String>, headers: Vec<(String, String)>) -> Self {
        let url = url.into();
        SecretSource::callable(move || {
            let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
            let mut request = agent.get(&url);
            for (name, value) in &headers {
                request = request.set(name, value);
            }
            let response = request.call().map_err(|e| e.to_string())?;
            response.into_string().map(|s| s.trim().to_string()).map_err(|e| e.to_string())
        })
    }
}

impl fmt::Debug for SecretSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecretSource::Static(_) => write!(f, "Static({REDACTED})"),
            SecretSource::Callable(_) => write!(f, "Callable"),
        }
    }
}

impl From<&str> for SecretSource {
    fn from(v: &str) -> Self {
        SecretSource::Static(v.to_string())
    }
}

impl From<String> for SecretSource {
    fn from(v: String) -> Self {
        SecretSource::Static(v)
    }
}

#[derive(Default)]
struct Inner {
    entries: BTreeMap<String, SecretSource>,
    known_values: BTreeSet<String>,
    warnings: Vec<String>,
    matcher: Option<Regex>,
}

impl Inner {
    fn remember(&mut self, name: &str, value: &str) {
        if value.chars().count() < MIN_MASKED_LEN {
            self.warnings.push(format!("secret `{name}` is shorter than {MIN_MASKED_LEN} characters and will not be masked"));
            return;
        }
        if self.known_values.insert(value.to_string()) {
            self.matcher = None;
        }
    }

    fn matcher(&mut self) -> Option<&Regex> {
        if self.matcher.is_none() && !self.known_values.is_empty() {
            let mut values: Vec<&String> = self.known_values.iter().collect();
            // Longest first so a value containing another is masked whole.
            values.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
            let pattern = values.iter().map(|v| regex::escape(v)).collect::<Vec<_>>().join("|");
            self.matcher = Some(Regex::new(&pattern).expect("escaped alternation is valid"));
        }
        self.matcher.as_ref()
    }
}

/// Shared, conversation-scoped secret store. Clones share state.
#[derive(Clone, Default)]
pub struct SecretRegistry {
    inner: Arc<Mutex<Inner>>,
}

impl fmt::Debug for SecretRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

/// Serializes as `{name: "**********"}`; values never appear.
impl Serialize for SecretRegistry {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let redacted: BTreeMap<String, &str> = self.names().into_iter().map(|n| (n, REDACTED)).collect();
        redacted.serialize(serializer)
    }
}

fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || matches!(c, '$' | '{' | '}' | '"' | '\'' | '`' | '=' | ';' | '|' | '&' | '(' | ')' | '<' | '>')
}

/// Shell-ish tokens of a command: split on whitespace, `$`, braces, quotes
/// and common shell operators.
pub fn command_tokens(command: &str) -> BTreeSet<&str> {
    command.split(is_delimiter).filter(|t| !t.is_empty()).collect()
}

impl SecretRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Upserts entries. Static values become maskable immediately; callables
    /// are not invoked here.
    pub fn update_secrets<I, K, V>(&self, patch: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<SecretSource>,
    {
        let mut inner = self.lock();
        for (name, source) in patch {
            let name = name.into();
            let source = source.into();
            if let SecretSource::Static(value) = &source {
                inner.remember(&name, value);
            }
            inner.entries.insert(name, source);
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().entries.is_empty()
    }

    pub fn warnings(&self) -> Vec<String> {
        self.lock().warnings.clone()
    }

    /// Resolves every registered name that appears as a whole token in
    /// `command`. Failing sources are skipped with a warning.
    pub fn scan_and_env(&self, command: &str) -> BTreeMap<String, String> {
        let tokens = command_tokens(command);
        let wanted: Vec<(String, SecretSource)> = {
            let inner = self.lock();
            inner
                .entries
                .iter()
                .filter(|(name, _)| tokens.contains(name.as_str()))
                .map(|(n, s)| (n.clone(), s.clone()))
                .collect()
        };
        let mut env = BTreeMap::new();
        for (name, source) in wanted {
            // Providers run without the registry lock held.
            let resolved = match source {
                SecretSource::Static(v) => Ok(v),
                SecretSource::Callable(provider) => provider(),
            };
            match resolved {
                Ok(value) => {
                    self.lock().remember(&name, &value);
                    env.insert(name, value);
                }
                Err(reason) => self.lock().warnings.push(format!("secret `{name}` could not be resolved: {reason}")),
            }
        }
        env
    }

    /// Replaces every known secret value in `text` with [`SECRET_MASK`].
    pub fn mask(&self, text: &str) -> String {
        let mut inner = self.lock();
        match inner.matcher() {
            Some(re) => re.replace_all(text, SECRET_MASK).into_owned(),
            None => text.to_string(),
        }
    }

    /// Masks every string inside a JSON value.
    pub fn mask_json(&self, value: &serde_json::Value) -> serde_json::Value {
        use serde_json::Value;
        match value {
            Value::String(s) => Value::String(self.mask(s)),
            Value::Array(items) => Value::Array(items.iter().map(|v| self.mask_json(v)).collect()),
            Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), self.mask_json(v))).collect()),
            other => other.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn referenced_names_are_exported() {
        let r = SecretRegistry::new();
        r.update_secrets([("API_KEY", "sk-123456")]);
        let env = r.scan_and_env("curl -H $API_KEY https://x");
        assert_eq!(env.get("API_KEY").map(String::as_str), Some("sk-123456"));
        assert!(r.scan_and_env("echo hello").is_empty());
        assert!(r.scan_and_env("echo ${API_KEY}").contains_key("API_KEY"));
    }

    #[test]
    fn whole_token_rule() {
        let r = SecretRegistry::new();
        r.update_secrets([("KEY", "value-1234")]);
        assert!(r.scan_and_env("echo MONKEY").is_empty());
        assert!(r.scan_and_env("echo $KEY_2").is_empty());
        assert!(r.scan_and_env("X=$KEY; echo").contains_key("KEY"));
    }

    #[test]
    fn masks_values() {
        let r = SecretRegistry::new();
        r.update_secrets([("T", "sk-123")]);
        assert_eq!(r.mask("token=sk-123"), "token=<secret-hidden>");
        assert_eq!(r.mask("nothing here"), "nothing here");
    }

    #[test]
    fn overlapping_values_mask_longest_first() {
        let r = SecretRegistry::new();
        r.update_secrets([("A", "abcd"), ("B", "abcdefgh")]);
        assert_eq!(r.mask("x abcdefgh y abcd"), "x <secret-hidden> y <secret-hidden>");
        assert!(!r.mask("abcdefghabcd").contains("efgh"));
    }

    #[test]
    fn rotation_keeps_old_value_masked() {
        let r = SecretRegistry::new();
        r.update_secrets([("API_KEY", "old-value-1")]);
        r.update_secrets([("API_KEY", "new-value-2")]);
        assert_eq!(r.scan_and_env("use $API_KEY")["API_KEY"], "new-value-2");
        assert_eq!(r.mask("old-value-1 new-value-2"), "<secret-hidden> <secret-hidden>");
        r.update_secrets(Vec::<(String, SecretSource)>::new());
        assert_eq!(r.names(), vec!["API_KEY".to_string()]);
    }

    #[test]
    fn callables_are_late_bound() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&calls);
        let r = SecretRegistry::new();
        r.update_secrets([(
            "TOKEN",
            SecretSource::callable(move || {
                let n = c.fetch_add(1, Ordering::SeqCst);
                Ok(format!("refreshed-{n}"))
            }),
        )]);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert!(r.scan_and_env("echo hi").is_empty());
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert_eq!(r.scan_and_env("echo $TOKEN")["TOKEN"], "refreshed-0");
        assert_eq!(r.mask("refreshed-0"), SECRET_MASK);
    }

    #[test]
    fn failing_source_is_skipped() {
        let r = SecretRegistry::new();
        r.update_secrets([
            ("BAD", SecretSource::callable(|| Err("vault down".into()))),
            ("GOOD", SecretSource::from("good-value")),
        ]);
        let env = r.scan_and_env("$BAD $GOOD");
        assert_eq!(env.len(), 1);
        assert!(r.warnings().iter().any(|w| w.contains("BAD")));
    }

    #[test]
    fn short_values_are_not_masked() {
        let r = SecretRegistry::new();
        r.update_secrets([("PIN", "123")]);
        assert_eq!(r.mask("a 123 b"), "a 123 b");
        assert_eq!(r.warnings().len(), 1);
    }

    #[test]
    fn serialization_is_redacted() {
        let r = SecretRegistry::new();
        r.update_secrets([("API_KEY", "sk-super-secret")]);
        let text = serde_json::to_string(&r).unwrap();
        assert!(!text.contains("sk-super-secret"));
        assert_eq!(text, format!("{{\"API_KEY\":\"{REDACTED}\"}}"));
        assert!(!format!("{r:?}").contains("sk-super-secret"));
    }
}
