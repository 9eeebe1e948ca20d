use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_typed, truncate_middle, Action, ToolContext, ToolDefinition, ToolError, ToolExecutor, ToolOutput};
use crate::secrets::SecretRegistry;
use crate::workspace::{CommandOutput, Workspace, WorkspaceError};

const DESCRIPTION: &str = "Run a shell command in the workspace directory and return its exit code and output. \
Commands run under `sh -c`. Long-running commands are killed after the timeout.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BashParams {
    pub timeout_secs: u64,
    /// Bytes kept from the start of long output.
    pub head_bytes: usize,
    /// Bytes kept from the end of long output.
    pub tail_bytes: usize,
    /// Keep one shell alive across calls (local workspaces only).
    pub persistent: bool,
}

impl Default for BashParams {
    fn default() -> Self {
        BashParams { timeout_secs: 120, head_bytes: 30 * 1024, tail_bytes: 10 * 1024, persistent: false }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BashArgs {
    pub command: String,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

impl BashArgs {
    pub fn parse(raw: &Value) -> Result<Self, String> {
        let args: BashArgs = parse_typed(raw)?;
        if args.command.is_empty() {
            return Err("command must not be empty".into());
        }
        if args.timeout_secs == Some(0) {
            return Err("timeout_secs must be positive".into());
        }
        Ok(args)
    }
}

pub fn schema() -> Value {
    json!({
        "type": "object",
        "properties": {
            "command": {"type": "string", "minLength": 1, "description": "The shell command to run."},
            "timeout_secs": {"type": "integer", "minimum": 1, "description": "Override the default timeout, in seconds."}
        },
        "required": ["command"],
        "additionalProperties": false
    })
}

pub struct BashTool {
    params: BashParams,
    workspace: Workspace,
    secrets: SecretRegistry,
    session: Mutex<Option<ShellSession>>,
}

pub(super) fn resolve(params: &Value, ctx: &ToolContext) -> Result<ToolDefinition, String> {
    let params: BashParams = serde_json::from_value(params.clone()).map_err(|e| e.to_string())?;
    let tool = BashTool::new(params, ctx.workspace.clone(), ctx.secrets.clone());
    tool.into_definition().map_err(|e| e.to_string())
}

fn render(output: &ToolOutput) -> String {
    let r = &output.result;
    let mut text = String::new();
    let stdout = r["stdout"].as_str().unwrap_or("");
    let stderr = r["stderr"].as_str().unwrap_or("");
    text.push_str(stdout);
    if !stderr.is_empty() {
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str("[stderr]\n");
        text.push_str(stderr);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    if r["timed_out"].as_bool() == Some(true) {
        text.push_str(&format!(
            "[command timed out after {} s; its process group was killed]",
            r["timeout_secs"].as_u64().unwrap_or(0)
        ));
    } else {
        text.push_str(&format!("[exit code: {}]", r["exit_code"]));
    }
    text
}

impl BashTool {
    pub fn new(params: BashParams, workspace: Workspace, secrets: SecretRegistry) -> Self {
        BashTool { params, workspace, secrets, session: Mutex::new(None) }
    }

    pub fn into_definition(self) -> Result<ToolDefinition, ToolError> {
        Ok(ToolDefinition::new("bash", DESCRIPTION, &schema(), Arc::new(self))?.with_renderer(render))
    }

    fn run(&self, command: &str, timeout: Duration, env: &BTreeMap<String, String>) -> Result<CommandOutput, WorkspaceError> {
        match (&self.workspace, self.params.persistent) {
            (Workspace::Local(local), true) => {
                let mut slot = self.session.lock().unwrap_or_else(|p| p.into_inner());
                if slot.is_none() {
                    *slot = Some(ShellSession::spawn(local.working_dir())?);
                }
                let session = slot.as_mut().expect("just spawned");
                let result = session.run(command, timeout, env);
                if result.is_err() || !session.alive() {
                    *slot = None;
                }
                result
            }
            _ => self.workspace.execute_command(command, Some(timeout), env),
        }
    }

    fn clip(&self, text: &str) -> String {
        truncate_middle(&self.secrets.mask(text), self.params.head_bytes, self.params.tail_bytes)
    }
}

impl ToolExecutor for BashTool {
    fn execute(&self, action: &Action) -> Result<ToolOutput, ToolError> {
        let args = BashArgs::parse(action.arguments()).map_err(ToolError::Execution)?;
        let timeout_secs = args.timeout_secs.unwrap_or(self.params.timeout_secs);
        let env = self.secrets.scan_and_env(&args.command);
        match self.run(&args.command, Duration::from_secs(timeout_secs), &env) {
            Ok(out) => {
                let result = json!({
                    "exit_code": out.exit_code,
                    "stdout": self.clip(&out.stdout),
                    "stderr": self.clip(&out.stderr),
                    "timed_out": false,
                    "duration_ms": out.duration_ms,
                });
                Ok(ToolOutput { result, is_error: out.exit_code != 0 })
            }
            Err(WorkspaceError::Timeout { after_ms, stdout, stderr }) => Ok(ToolOutput::error(json!({
                "exit_code": -1,
                "stdout": self.clip(&stdout),
                "stderr": self.clip(&stderr),
                "timed_out": true,
                "timeout_secs": timeout_secs,
                "duration_ms": after_ms,
            }))),
            Err(e) => Err(e.into()),
        }
    }
}

fn shell_quote(value: &str) -> String {
    format!("'{}'", value.replace('\'', r"'\''"))
}

/// One long-lived `sh` reading commands from stdin. Each command's output
/// goes to per-call files; the shell's own stdout only carries completion
/// markers.
struct ShellSession {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    scratch: PathBuf,
    counter: u64,
}

impl ShellSession {
    fn spawn(cwd: &Path) -> Result<Self, WorkspaceError> {
        let scratch = std::env::temp_dir().join(format!("agentrt-shell-{}", uuid::Uuid::new_v4().simple()));
        fs::create_dir_all(&scratch).map_err(|e| WorkspaceError::Spawn(e.to_string()))?;
        let mut child = Command::new("sh")
            .current_dir(cwd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .process_group(0)
            .spawn()
            .map_err(|e| WorkspaceError::Spawn(e.to_string()))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ShellSession { child, stdin, lines, scratch, counter: 0 })
    }

    fn alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    fn kill(&mut self) {
        unsafe {
            libc::killpg(self.child.id() as libc::pid_t, libc::SIGKILL);
        }
        let _ = self.child.wait();
    }

    fn run(&mut self, command: &str, timeout: Duration, env: &BTreeMap<String, String>) -> Result<CommandOutput, WorkspaceError> {
        self.counter += 1;
        let n = self.counter;
        let out_path = self.scratch.join(format!("{n}.out"));
        let err_path = self.scratch.join(format!("{n}.err"));
        let marker = format!("__AGENTRT_DONE_{n}__");
        let mut script = String::new();
        for (name, value) in env {
            script.push_str(&format!("export {name}={}\n", shell_quote(value)));
        }
        script.push_str(&format!(
            "eval {} </dev/null >{} 2>{}\nprintf '\\n{marker} %s\\n' \"$?\"\n",
            shell_quote(command),
            shell_quote(&out_path.to_string_lossy()),
            shell_quote(&err_path.to_string_lossy()),
        ));
        let started = Instant::now();
        self.stdin
            .write_all(script.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| WorkspaceError::Spawn(format!("shell is gone: {e}")))?;
        let read = |p: &Path| String::from_utf8_lossy(&fs::read(p).unwrap_or_default()).into_owned();
        let exit_code = loop {
            let remaining = timeout.saturating_sub(started.elapsed());
            match self.lines.recv_timeout(remaining) {
                Ok(line) => {
                    if let Some(code) = line.strip_prefix(&marker) {
                        break code.trim().parse::<i32>().unwrap_or(-1);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.kill();
                    return Err(WorkspaceError::Timeout {
                        after_ms: started.elapsed().as_millis() as u64,
                        stdout: read(&out_path),
                        stderr: read(&err_path),
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    // The command ended the shell (e.g. `exit 3`).
                    let status = self.child.wait().map_err(|e| WorkspaceError::Spawn(e.to_string()))?;
                    break status.code().unwrap_or(-1);
                }
            }
        };
        let output = CommandOutput {
            exit_code,
            stdout: read(&out_path),
            stderr: read(&err_path),
            duration_ms: started.elapsed().as_millis() as u64,
        };
        let _ = fs::remove_file(&out_path);
        let _ = fs::remove_file(&err_path);
        Ok(output)
    }
}

impl Drop for ShellSession {
    fn drop(&mut self) {
        self.kill();
        let _ = fs::remove_dir_all(&self.scratch);
    }
}
