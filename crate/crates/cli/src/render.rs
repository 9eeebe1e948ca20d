//! One-line, human-readable summaries of events for terminal output.

use agentrt::events::{ContentPart, Event, EventPayload, MessageRole};

const MAX_WIDTH: usize = 160;

fn clip(text: &str) -> String {
    let flat = text.replace('\n', " \u{21b5} ");
    if flat.chars().count() <= MAX_WIDTH {
        return flat;
    }
    let kept: String = flat.chars().take(MAX_WIDTH - 3).collect();
    format!("{kept}...")
}

fn content_text(parts: &[ContentPart]) -> String {
    parts
        .iter()
        .map(|p| match p {
            ContentPart::Text { text } => text.clone(),
            ContentPart::Image { url } => format!("[image {url}]"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn describe(index: usize, event: &Event) -> String {
    let body = match &event.payload {
        EventPayload::Message(m) => {
            let who = match m.role {
                MessageRole::User => "user",
                MessageRole::Assistant => "assistant",
            };
            format!("{who}: {}", content_text(&m.content))
        }
        EventPayload::SystemPrompt(p) => format!("system prompt ({} chars, {} tools)", p.prompt.len(), p.tools.len()),
        EventPayload::Action(a) => {
            let thought = a.thought.as_deref().map(|t| format!("  # {t}")).unwrap_or_default();
            format!("action {} [{}] {}{thought}", a.tool_name, a.security_risk.as_str(), a.arguments)
        }
        EventPayload::Observation(o) => {
            let tag = if o.is_error { "error" } else { "ok" };
            format!("observation {} ({tag}): {}", o.tool_name, o.llm_text)
        }
        EventPayload::UserReject(r) => match &r.note {
            Some(note) => format!("rejected {}: {note}", r.tool_call_id),
            None => format!("rejected {}", r.tool_call_id),
        },
        EventPayload::AgentError(e) => format!("agent error: {}", e.error),
        EventPayload::CondensationSummary(s) => format!("summary: {}", s.summary),
        EventPayload::Condensation(c) => format!("condensed {} events", c.forgotten_event_ids.len()),
        EventPayload::CondensationRequest => "condensation requested".to_string(),
        EventPayload::StateUpdate(u) => format!("{} = {}", u.field, u.value),
        EventPayload::Pause => "pause".to_string(),
    };
    clip(&format!("{index:>4} {body}"))
}
