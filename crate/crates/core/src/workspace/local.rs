use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{resolve_in, CommandOutput, WorkspaceError};

/// The host machine: commands run under `sh -c` in `working_dir`.
#[derive(Debug, Clone)]
pub struct LocalWorkspace {
    working_dir: PathBuf,
}

impl LocalWorkspace {
    pub fn new(working_dir: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let working_dir = working_dir.into();
        fs::create_dir_all(&working_dir).map_err(|e| WorkspaceError::Io(format!("{}: {e}", working_dir.display())))?;
        let working_dir = working_dir
            .canonicalize()
            .map_err(|e| WorkspaceError::Io(format!("{}: {e}", working_dir.display())))?;
        Ok(LocalWorkspace { working_dir })
    }

    pub fn working_dir(&self) -> &Path {
        &self.working_dir
    }

    pub fn execute_command(
        &self,
        command: &str,
        timeout: Option<Duration>,
        env: &BTreeMap<String, String>,
    ) -> Result<CommandOutput, WorkspaceError> {
        run_shell(command, &self.working_dir, timeout, env)
    }

    pub fn file_upload(&self, path: &str, content: &[u8]) -> Result<(), WorkspaceError> {
        let target = resolve_in(&self.working_dir, path)?;
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| WorkspaceError::Io(e.to_string()))?;
        }
        fs::write(&target, content).map_err(|e| WorkspaceError::Io(format!("{}: {e}", target.display())))
    }

    pub fn file_download(&self, path: &str) -> Result<Vec<u8>, WorkspaceError> {
        let target = resolve_in(&self.working_dir, path)?;
        match fs::read(&target) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(WorkspaceError::NotFound(path.to_string())),
            Err(e) => Err(WorkspaceError::Io(format!("{}: {e}", target.display()))),
        }
    }
}

fn spawn_reader(mut pipe: impl Read + Send + 'static) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

fn kill_group(child: &Child) {
    // The child leads its own process group, so this reaches grandchildren.
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
}

/// Runs `command` with the platform shell in its own process group. On
/// timeout the whole group is killed.
pub fn run_shell(
    command: &str,
    cwd: &Path,
    timeout: Option<Duration>,
    env: &BTreeMap<String, String>,
) -> Result<CommandOutput, WorkspaceError> {
    let started = Instant::now();
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(cwd)
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| WorkspaceError::Spawn(e.to_string()))?;
    let stdout = spawn_reader(child.stdout.take().expect("piped stdout"));
    let stderr = spawn_reader(child.stderr.take().expect("piped stderr"));

    let mut timed_out = false;
    let status = loop {
        match child.try_wait().map_err(|e| WorkspaceError::Spawn(e.to_string()))? {
            Some(status) => break status,
            None => {
                if timeout.is_some_and(|t| started.elapsed() >= t) {
                    kill_group(&child);
                    timed_out = true;
                    break child.wait().map_err(|e| WorkspaceError::Spawn(e.to_string()))?;
                }
                thread::sleep(Duration::from_millis(5));
            }
        }
    };
    if !timed_out {
        // Reap anything left in the group holding the pipes open.
        kill_group(&child);
    }
    let stdout = String::from_utf8_lossy(&stdout.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&stderr.join().unwrap_or_default()).into_owned();
    let duration_ms = started.elapsed().as_millis() as u64;
    if timed_out {
        return Err(WorkspaceError::Timeout { after_ms: duration_ms, stdout, stderr });
    }
    let exit_code = status.code().unwrap_or_else(|| {
        use std::os::unix::process::ExitStatusExt;
        128 + status.signal().unwrap_or(0)
    });
    Ok(CommandOutput { exit_code, stdout, stderr, duration_ms })
}
