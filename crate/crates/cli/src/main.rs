mod render;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use agentrt::agent::load_skills_from_dir;
use agentrt::conversation::ConversationOptions;
use agentrt::events::{apply_condensations, serialize_event, to_llm_messages};
use agentrt::security::ConfirmationDecision;
use agentrt::tools::ToolContext;
use agentrt::workspace::RemoteWorkspace;
use agentrt::{
    AgentConfig, AgentStatus, ConfirmationPolicy, Conversation, ConversationState, LocalConversation, RiskLevel,
    SecretRegistry, ToolRegistry, ToolSpec, Workspace,
};
use agentrt_server::{AgentServer, BackgroundServer, ServerConfig};

#[derive(Parser)]
#[command(name = "agentrt", version, about = "Run tool-using agents locally or behind an agent server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start an agent server.
    Serve {
        /// TOML config file; AGENTRT_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Send a message to an agent and run it until it stops.
    Run(RunArgs),
    /// Print a persisted conversation.
    Inspect {
        /// Conversation state directory (holds base_state.json).
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = InspectFormat::Lines)]
        format: InspectFormat,
    },
    /// List the built-in tools.
    Tools {
        /// Print the model-facing JSON schemas.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectFormat {
    /// One summary line per event.
    Lines,
    /// The raw event log, one JSON object per line.
    Events,
    /// The chat messages a model would see next.
    View,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Agent config JSON file.
    #[arg(long)]
    agent: PathBuf,
    /// Working directory for a local run.
    #[arg(long, default_value = ".")]
    workspace: PathBuf,
    /// Persist the conversation here; resumed if it already holds one.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Run on an agent server instead of locally.
    #[arg(long, conflicts_with_all = ["state"])]
    server: Option<String>,
    #[arg(long, env = "AGENTRT_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    /// never, always, risky or risky:<low|medium|high>.
    #[arg(long, default_value = "risky", value_parser = parse_policy)]
    policy: ConfirmationPolicy,
    /// Approve every action that asks for confirmation.
    #[arg(long)]
    yes: bool,
    /// Secrets as NAME=VALUE; the value is read from the environment when
    /// only NAME is given.
    #[arg(long = "secret", value_name = "NAME[=VALUE]")]
    secrets: Vec<String>,
    /// Message to send; omit to continue a resumed conversation.
    message: Vec<String>,
}

fn parse_policy(text: &str) -> Result<ConfirmationPolicy, String> {
    let (kind, threshold) = match text.split_once(':') {
        Some((k, t)) => (k, Some(t)),
        None => (text, None),
    };
    match (kind, threshold) {
        ("never", None) => Ok(ConfirmationPolicy::NeverConfirm),
        ("always", None) => Ok(ConfirmationPolicy::AlwaysConfirm),
        ("risky", None) => Ok(ConfirmationPolicy::confirm_risky()),
        ("risky", Some(level)) => match RiskLevel::parse_lenient(level) {
            RiskLevel::Unknown => Err(format!("unknown risk level `{level}`")),
            threshold => Ok(ConfirmationPolicy::ConfirmRisky { threshold }),
        },
        _ => Err(format!("unknown policy `{text}`")),
    }
}

fn parse_secret(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((name, value)) if !name.is_empty() => Ok((name.to_string(), value.to_string())),
        Some(_) => bail!("secret name missing in `{spec}`"),
        None => {
            let value = std::env::var(spec).with_context(|| format!("secret {spec} is not set in the environment"))?;
            Ok((spec.to_string(), value))
        }
    }
}

fn load_agent(path: &Path, workspace: Option<&Path>) -> Result<AgentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config: AgentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing agent config {}", path.display()))?;
    if let Some(dir) = workspace.map(|w| w.join(".agentrt/skills")).filter(|d| d.is_dir()) {
        let (skills, warnings) = load_skills_from_dir(&dir);
        for warning in warnings {
            log::warn!("skipping skill: {warning}");
        }
        config.context.skills.extend(skills);
    }
    Ok(config)
}

fn ask(question: &str) -> Result<Option<String>> {
    eprint!("{question}");
    std::io::stderr().flush()?;
    let mut line = String::new();
    if std::io::stdin().lock().read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}

fn run(args: RunArgs) -> Result<AgentStatus> {
    let local_dir = args.server.is_none().then_some(args.workspace.as_path());
    let config = load_agent(&args.agent, local_dir)?;
    let options = ConversationOptions::default().with_confirmation_policy(args.policy);
    let conversation = match (&args.server, &args.state) {
        (Some(url), _) => {
            let workspace = RemoteWorkspace::new(url, args.api_key.as_deref(), "/workspace");
            Conversation::with_options(config, Workspace::Remote(workspace), options)?
        }
        (None, Some(state)) if state.join("base_state.json").exists() => {
            let workspace = Workspace::local(&args.workspace)?;
            log::info!("resuming {}", state.display());
            Conversation::Local(LocalConversation::resume(config, workspace, state, ConversationOptions::default())?)
        }
        (None, state) => {
            let workspace = Workspace::local(&args.workspace)?;
            let options = match state {
                Some(dir) => options.with_persistence_dir(dir),
                None => options,
            };
            Conversation::with_options(config, workspace, options)?
        }
    };
    if !args.secrets.is_empty() {
        let patch = args.secrets.iter().map(|s| parse_secret(s)).collect::<Result<_>>()?;
        conversation.update_secrets(patch)?;
    }
    conversation.subscribe(|index, event| println!("{}", render::describe(index, event)));
    if !args.message.is_empty() {
        conversation.send_message(args.message.join(" "))?;
    }

    let mut status = conversation.run()?;
    while status == AgentStatus::WaitingForConfirmation {
        let (decision, note) = if args.yes {
            (ConfirmationDecision::Approve, None)
        } else {
            match ask("approve this action? [y/N/reason to reject] ")? {
                Some(answer) if matches!(answer.as_str(), "y" | "Y" | "yes") => (ConfirmationDecision::Approve, None),
                Some(answer) if !answer.is_empty() && !matches!(answer.as_str(), "n" | "N" | "no") => {
                    (ConfirmationDecision::Reject, Some(answer))
                }
                Some(_) => (ConfirmationDecision::Reject, None),
                None => break,
            }
        };
        status = conversation.confirm(decision, note)?;
    }
    conversation.close()?;
    eprintln!("conversation {} is {}", conversation.id(), status.as_str());
    Ok(status)
}

fn inspect(dir: &Path, format: InspectFormat) -> Result<()> {
    let state = ConversationState::resume(dir).with_context(|| format!("reading {}", dir.display()))?;
    let events = state.events().as_slice();
    let mut out = std::io::stdout().lock();
    match format {
        InspectFormat::Lines => {
            let base = state.base();
            writeln!(
                out,
                "conversation {} ({}), {} events, {} model calls, ${:.4}",
                base.conversation_id,
                base.agent_status.as_str(),
                events.len(),
                base.stats.llm_calls,
                base.stats.total_cost
            )?;
            if let Some(title) = &base.title {
                writeln!(out, "title: {title}")?;
            }
            for (index, event) in events.iter().enumerate() {
                writeln!(out, "{}", render::describe(index, event))?;
            }
        }
        InspectFormat::Events => {
            for event in events {
                writeln!(out, "{}", serialize_event(event))?;
            }
        }
        InspectFormat::View => {
            let view = apply_condensations(events)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&to_llm_messages(&view)?)?)?;
        }
    }
    Ok(())
}

fn tools(json: bool) -> Result<()> {
    let dir = std::env::temp_dir();
    let context = ToolContext::new(Workspace::local(&dir)?, SecretRegistry::new());
    let registry = ToolRegistry::with_builtins();
    let mut out = std::io::stdout().lock();
    for name in registry.names() {
        let tool = registry.resolve(&ToolSpec::new(&name), &context)?;
        if json {
            writeln!(out, "{}", serde_json::to_string_pretty(&tool.to_chat_tool())?)?;
        } else {
            writeln!(out, "{name:<12} {}", tool.description())?;
        }
    }
    Ok(())
}

fn serve(config: Option<PathBuf>) -> Result<()> {
    let config = ServerConfig::from_sources(config.as_deref(), std::env::vars())?;
    let server = BackgroundServer::start(AgentServer::new(config)?)?;
    log::info!("agent server listening on {}", server.url());
    eprintln!("listening on {}", server.url());
    loop {
        std::thread::park();
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config } => serve(config),
        Command::Run(args) => run(args).map(|status| {
            if matches!(status, AgentStatus::Error | AgentStatus::Stuck) {
                std::process::exit(2);
            }
        }),
        Command::Inspect { dir, format } => inspect(&dir, format),
        Command::Tools { json } => tools(json),
    };
    if let Err(e) = result {
        let broken_pipe = e
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe);
        if broken_pipe {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies() {
        assert_eq!(parse_policy("never").unwrap(), ConfirmationPolicy::NeverConfirm);
        assert_eq!(parse_policy("always").unwrap(), ConfirmationPolicy::AlwaysConfirm);
        assert_eq!(parse_policy("risky").unwrap(), ConfirmationPolicy::ConfirmRisky { threshold: RiskLevel::High });
        assert_eq!(
            parse_policy("risky:medium").unwrap(),
            ConfirmationPolicy::ConfirmRisky { threshold: RiskLevel::Medium }
        );
        assert!(parse_policy("risky:extreme").is_err());
        assert!(parse_policy("sometimes").is_err());
    }

    #[test]
    fn secrets() {
        assert_eq!(parse_secret("A=b=c").unwrap(), ("A".into(), "b=c".into()));
        assert!(parse_secret("=x").is_err());
        assert!(parse_secret("AGENTRT_TEST_SURELY_UNSET_VAR").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
