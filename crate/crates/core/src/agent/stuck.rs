use std::collections::HashMap;

use crate::events::{Event, EventPayload, MessageRole};

/// Whether the agent is looping without progress.
///
/// Only events after the latest user message count. True when the last
/// `window` tool calls and their observations are identical (tool, arguments,
/// output), or when the last `window` agent errors carry the same text with
/// no successful observation in between.
pub fn detect_stuck(log: &[Event], window: usize) -> bool {
    if window == 0 {
        return false;
    }
    let start = log
        .iter()
        .rposition(|e| matches!(&e.payload, EventPayload::Message(m) if m.role == MessageRole::User))
        .map_or(0, |i| i + 1);
    let recent = &log[start..];
    repeated_pairs(recent, window) || repeated_errors(recent, window)
}

fn repeated_pairs(events: &[Event], window: usize) -> bool {
    let mut actions = HashMap::new();
    for e in events {
        if let EventPayload::Action(a) = &e.payload {
            actions.insert(a.tool_call_id.as_str(), a);
        }
    }
    let pairs: Vec<_> = events
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::Observation(o) => actions
                .get(o.tool_call_id.as_str())
                .map(|a| (a.tool_name.as_str(), &a.arguments, o.llm_text.as_str())),
            _ => None,
        })
        .collect();
    if pairs.len() < window {
        return false;
    }
    let last = &pairs[pairs.len() - window..];
    last.iter().all(|p| *p == last[0])
}

fn repeated_errors(events: &[Event], window: usize) -> bool {
    let errors: Vec<(usize, &str)> = events
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match &e.payload {
            EventPayload::AgentError(err) => Some((i, err.error.as_str())),
            _ => None,
        })
        .collect();
    if errors.len() < window {
        return false;
    }
    let last = &errors[errors.len() - window..];
    if !last.iter().all(|(_, text)| *text == last[0].1) {
        return false;
    }
    let first = last[0].0;
    !events[first..]
        .iter()
        .any(|e| matches!(&e.payload, EventPayload::Observation(o) if !o.is_error))
}
