use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{AgentConfig, Skill};
use crate::events::SystemPromptEvent;
use crate::security::augment_schema;
use crate::tools::ToolDefinition;

/// Versioned base instructions for every agent.
pub const BASE_AGENT_PROMPT: &str = include_str!("../../assets/agent_prompt.v1.md");

fn render_skill(skill: &Skill) -> String {
    format!("<skill name=\"{}\">\n{}\n</skill>", skill.name, skill.content.trim_end())
}

/// Renders the triggered skills a user message activates, for appending to
/// that message.
pub fn render_triggered_skills(skills: &[&Skill]) -> Option<String> {
    let parts: Vec<String> = skills.iter().filter(|s| !s.is_always_active()).map(|s| render_skill(s)).collect();
    (!parts.is_empty()).then(|| parts.join("\n\n"))
}

/// Always-active skills plus those with a keyword occurring (case-insensitively)
/// in `text`, in their original order.
pub fn activate_skills<'a>(skills: &'a [Skill], text: &str) -> Vec<&'a Skill> {
    let haystack = text.to_lowercase();
    skills
        .iter()
        .filter(|s| match &s.trigger {
            None => true,
            Some(keywords) => keywords
                .iter()
                .any(|k| !k.is_empty() && haystack.contains(&k.to_lowercase())),
        })
        .collect()
}

/// Tool schemas as attached to the system prompt and sent to the model.
pub fn tool_envelopes(config: &AgentConfig, tools: &[ToolDefinition]) -> Vec<Value> {
    let augment = config.security_analyzer.as_ref().is_some_and(|a| a.augments_schema());
    tools
        .iter()
        .map(|t| {
            let mut schema = t.to_schema();
            if augment {
                schema.parameters = augment_schema(&schema.parameters);
            }
            schema.to_chat_tool()
        })
        .collect()
}

pub fn build_system_prompt(config: &AgentConfig, tools: &[ToolDefinition]) -> SystemPromptEvent {
    let ctx = &config.context;
    let mut sections: Vec<String> = Vec::new();
    if let Some(prefix) = ctx.system_prompt_prefix.as_deref().filter(|p| !p.is_empty()) {
        sections.push(prefix.to_string());
    }
    sections.push(BASE_AGENT_PROMPT.trim_end().to_string());
    for skill in ctx.skills.iter().filter(|s| s.is_always_active()) {
        sections.push(render_skill(skill));
    }
    if let Some(suffix) = ctx.system_prompt_suffix.as_deref().filter(|s| !s.is_empty()) {
        sections.push(suffix.to_string());
    }
    SystemPromptEvent { prompt: sections.join("\n\n"), tools: tool_envelopes(config, tools) }
}

fn parse_front_matter(text: &str) -> (Vec<(String, String)>, &str) {
    let mut lines = text.split_inclusive('\n');
    let Some(first) = lines.next() else {
        return (Vec::new(), text);
    };
    if first.trim_end() != "---" {
        return (Vec::new(), text);
    }
    let mut consumed = first.len();
    let mut fields = Vec::new();
    for line in lines {
        consumed += line.len();
        let trimmed = line.trim();
        if trimmed == "---" {
            return (fields, &text[consumed..]);
        }
        if let Some((key, value)) = trimmed.split_once(':') {
            fields.push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    // Unterminated front matter is treated as plain content.
    (Vec::new(), text)
}

fn parse_keywords(value: &str) -> Vec<String> {
    value
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|k| k.trim().trim_matches(|c| c == '"' || c == '\'').to_string())
        .filter(|k| !k.is_empty())
        .collect()
}

/// Loads every `*.md` file in `dir` as a skill, sorted by file name.
/// Unreadable files are skipped and reported in the returned warnings.
pub fn load_skills_from_dir(dir: &Path) -> (Vec<Skill>, Vec<String>) {
    let mut warnings = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) => {
            warnings.push(format!("{}: {e}", dir.display()));
            return (Vec::new(), warnings);
        }
    };
    let mut paths: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "md"))
        .collect();
    paths.sort();
    let mut skills = Vec::new();
    for path in paths {
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                warnings.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let (fields, body) = parse_front_matter(&text);
        let mut name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut trigger = None;
        for (key, value) in fields {
            match key.as_str() {
                "name" if !value.is_empty() => name = value,
                "trigger" | "triggers" => {
                    let keywords = parse_keywords(&value);
                    trigger = (!keywords.is_empty()).then_some(keywords);
                }
                _ => {}
            }
        }
        skills.push(Skill { name, content: body.trim().to_string(), trigger });
    }
    (skills, warnings)
}
