//! Where commands run and files live for one conversation.
//!
//! A [`Workspace`] is either the local host or an agent server reached over
//! HTTP. Both variants expose the same three operations; tools never know
//! which one they are talking to.

mod local;
mod remote;

#[cfg(feature = "docker")]
mod docker;

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use local::{run_shell, LocalWorkspace};
pub use remote::{ApiClient, ApiError, RemoteWorkspace};

#[cfg(feature = "docker")]
pub use docker::DockerWorkspace;

/// Used when neither a directory nor a host is given.
pub const DEFAULT_WORKING_DIR: &str = "workspace/project";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum WorkspaceError {
    #[error("command timed out after {after_ms} ms")]
    Timeout { after_ms: u64, stdout: String, stderr: String },
    #[error("failed to spawn command: {0}")]
    Spawn(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("path escapes the workspace: {0}")]
    PathEscape(String),
    #[error("no such file: {0}")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("server returned HTTP {status}: {body}")]
    Server { status: u16, body: String },
}

#[derive(Debug, Clone)]
pub enum Workspace {
    Local(LocalWorkspace),
    Remote(RemoteWorkspace),
}

impl Workspace {
    /// Local when only a directory is given, remote when a host is given,
    /// local under [`DEFAULT_WORKING_DIR`] otherwise.
    pub fn new(working_dir: Option<&Path>, host: Option<&str>, api_key: Option<&str>) -> Result<Self, WorkspaceError> {
        match host {
            Some(host) => {
                let dir = working_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_WORKING_DIR));
                Ok(Workspace::Remote(RemoteWorkspace::new(host, api_key, dir)))
            }
            None => {
                let dir = working_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_WORKING_DIR));
                Ok(Workspace::Local(LocalWorkspace::new(dir)?))
            }
        }
    }

    pub fn local(working_dir: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        Ok(Workspace::Local(LocalWorkspace::new(working_dir)?))
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, Workspace::Remote(_))
    }

    pub fn working_dir(&self) -> &Path {
        match self {
            Workspace::Local(w) => w.working_dir(),
            Workspace::Remote(w) => w.working_dir(),
        }
    }

    pub fn execute_command(
        &self,
        command: &str,
        timeout: Option<Duration>,
        env: &BTreeMap<String, String>,
    ) -> Result<CommandOutput, WorkspaceError> {
        match self {
            Workspace::Local(w) => w.execute_command(command, timeout, env),
            Workspace::Remote(w) => w.execute_command(command, timeout, env),
        }
    }

    pub fn file_upload(&self, path: &str, content: &[u8]) -> Result<(), WorkspaceError> {
        match self {
            Workspace::Local(w) => w.file_upload(path, content),
            Workspace::Remote(w) => w.file_upload(path, content),
        }
    }

    pub fn file_download(&self, path: &str) -> Result<Vec<u8>, WorkspaceError> {
        match self {
            Workspace::Local(w) => w.file_download(path),
            Workspace::Remote(w) => w.file_download(path),
        }
    }

    /// Tears the workspace down. For a remote workspace this deletes the
    /// server-side conversation if this handle created it.
    pub fn close(&self) -> Result<(), WorkspaceError> {
        match self {
            Workspace::Local(_) => Ok(()),
            Workspace::Remote(w) => w.close(),
        }
    }

    /// Runs `body` with the workspace and closes it afterwards, even when
    /// `body` fails.
    pub fn scoped<R>(self, body: impl FnOnce(&Workspace) -> R) -> Result<R, WorkspaceError> {
        let out = body(&self);
        self.close()?;
        Ok(out)
    }
}

impl From<LocalWorkspace> for Workspace {
    fn from(w: LocalWorkspace) -> Self {
        Workspace::Local(w)
    }
}

impl From<RemoteWorkspace> for Workspace {
    fn from(w: RemoteWorkspace) -> Self {
        Workspace::Remote(w)
    }
}

fn normalize(path: &Path) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for component in path.components() {
        match component {
            Component::Prefix(_) | Component::RootDir => out.push(component.as_os_str()),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::Normal(part) => out.push(part),
        }
    }
    Some(out)
}

/// Resolves `path` (relative or absolute) under `root`, rejecting lexical
/// `..` escapes and symlinks pointing outside.
pub fn resolve_in(root: &Path, path: &str) -> Result<PathBuf, WorkspaceError> {
    let escape = || WorkspaceError::PathEscape(path.to_string());
    if path.is_empty() {
        return Err(escape());
    }
    let root = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
    let joined = root.join(path);
    let target = normalize(&joined).ok_or_else(escape)?;
    if !target.starts_with(&root) {
        return Err(escape());
    }
    // The deepest existing ancestor must still be inside after resolving links.
    let mut probe = target.as_path();
    loop {
        if let Ok(real) = probe.canonicalize() {
            if !real.starts_with(&root) {
                return Err(escape());
            }
            break;
        }
        match probe.parent() {
            Some(parent) => probe = parent,
            None => break,
        }
    }
    Ok(target)
}
