use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use super::{ApiClient, RemoteWorkspace, Workspace, WorkspaceError};

/// Starts the agent server inside a container via the `docker` CLI and
/// talks to it as a remote workspace. The container is removed on
/// [`DockerWorkspace::stop`] or drop.
pub struct DockerWorkspace {
    container_id: String,
    workspace: Workspace,
}

impl DockerWorkspace {
    pub fn start(image: &str, host_port: u16, api_key: &str) -> Result<Self, WorkspaceError> {
        let output = Command::new("docker")
            .args(["run", "-d", "--rm", "-p"])
            .arg(format!("127.0.0.1:{host_port}:8000"))
            .arg("-e")
            .arg(format!("AGENTRT_API_KEY={api_key}"))
            .arg(image)
            .output()
            .map_err(|e| WorkspaceError::Spawn(format!("docker: {e}")))?;
        if !output.status.success() {
            return Err(WorkspaceError::Spawn(String::from_utf8_lossy(&output.stderr).into_owned()));
        }
        let container_id = String::from_utf8_lossy(&output.stdout).trim().to_string();
        let host = format!("http://127.0.0.1:{host_port}");
        let client = ApiClient::new(&host, Some(api_key));
        let deadline = Instant::now() + Duration::from_secs(60);
        while client.get_json("/health").is_err() {
            if Instant::now() > deadline {
                let _ = Command::new("docker").args(["rm", "-f", &container_id]).output();
                return Err(WorkspaceError::Transport("container never became healthy".into()));
            }
            thread::sleep(Duration::from_millis(250));
        }
        let workspace = Workspace::Remote(RemoteWorkspace::new(&host, Some(api_key), "/workspace"));
        Ok(DockerWorkspace { container_id, workspace })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn stop(mut self) -> Result<(), WorkspaceError> {
        self.remove()
    }

    fn remove(&mut self) -> Result<(), WorkspaceError> {
        if self.container_id.is_empty() {
            return Ok(());
        }
        let id = std::mem::take(&mut self.container_id);
        Command::new("docker")
            .args(["rm", "-f", &id])
            .output()
            .map(|_| ())
            .map_err(|e| WorkspaceError::Spawn(e.to_string()))
    }
}

impl Drop for DockerWorkspace {
    fn drop(&mut self) {
        let _ = self.remove();
    }
}
