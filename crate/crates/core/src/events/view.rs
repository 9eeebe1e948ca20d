use std::collections::{HashMap, HashSet};

use super::{CondensationSummaryEvent, Event, EventId, EventPayload, MessageRole};
use crate::llm::{Message, Role, ToolCall};

/// Prefix of the user-role message a condensation summary renders to.
pub const SUMMARY_PREFIX: &str = "Summary of earlier events:";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ViewError {
    #[error("event {id} of kind `{kind}` is not visible to the model")]
    NonConvertibleEvent { id: EventId, kind: &'static str },
    #[error("condensation forgets unknown event {0}")]
    DanglingForgottenId(EventId),
}

/// Converts LLM-visible events into chat messages, one message per event.
pub fn to_llm_messages(events: &[Event]) -> Result<Vec<Message>, ViewError> {
    events.iter().map(event_to_message).collect()
}

fn event_to_message(event: &Event) -> Result<Message, ViewError> {
    let message = match &event.payload {
        EventPayload::Message(m) => Message {
            role: match m.role {
                MessageRole::User => Role::User,
                MessageRole::Assistant => Role::Assistant,
            },
            content: m.content.clone(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        },
        EventPayload::SystemPrompt(p) => Message::system(p.prompt.clone()),
        EventPayload::Action(a) => Message {
            role: Role::Assistant,
            content: a
                .thought
                .iter()
                .filter(|t| !t.is_empty())
                .map(|t| crate::events::ContentPart::text(t.clone()))
                .collect(),
            tool_calls: vec![ToolCall {
                id: a.tool_call_id.clone(),
                name: a.tool_name.clone(),
                arguments: a.arguments.clone(),
            }],
            tool_call_id: None,
        },
        EventPayload::Observation(o) => Message::tool_result(o.tool_call_id.clone(), o.llm_text.clone()),
        EventPayload::UserReject(r) => {
            let mut text = String::from("The user rejected this action; it was not executed.");
            if let Some(note) = r.note.as_deref().filter(|n| !n.is_empty()) {
                text.push_str("\nUser note: ");
                text.push_str(note);
            }
            Message::tool_result(r.tool_call_id.clone(), text)
        }
        EventPayload::AgentError(e) => match &e.tool_call_id {
            Some(id) => Message::tool_result(id.clone(), format!("Error: {}", e.error)),
            None => Message::user(format!("Error: {}", e.error)),
        },
        EventPayload::CondensationSummary(s) => Message::user(format!("{SUMMARY_PREFIX}\n{}", s.summary)),
        EventPayload::Condensation(_)
        | EventPayload::CondensationRequest
        | EventPayload::StateUpdate(_)
        | EventPayload::Pause => {
            return Err(ViewError::NonConvertibleEvent { id: event.id, kind: event.kind() })
        }
    };
    Ok(message)
}

/// Builds the model-visible view of a log: forgotten events are dropped, each
/// surviving condensation contributes a summary at its anchor's position, and
/// internal events are removed. The input is not modified.
///
/// A condensation's summary takes the condensation event's own id, so a later
/// condensation can forget an earlier summary by naming that id.
pub fn apply_condensations(log: &[Event]) -> Result<Vec<Event>, ViewError> {
    let mut slot: HashMap<EventId, usize> = HashMap::with_capacity(log.len());
    for (index, event) in log.iter().enumerate() {
        slot.insert(event.id, index);
    }
    // A summary sits where its anchor sat; anchors may themselves be summaries.
    for event in log {
        if let EventPayload::Condensation(c) = &event.payload {
            let anchor_slot = *slot.get(&c.anchor).ok_or(ViewError::DanglingForgottenId(c.anchor))?;
            slot.insert(event.id, anchor_slot);
        }
    }

    let mut forgotten: HashSet<EventId> = HashSet::new();
    for event in log {
        if let EventPayload::Condensation(c) = &event.payload {
            for id in &c.forgotten_event_ids {
                if !slot.contains_key(id) {
                    return Err(ViewError::DanglingForgottenId(*id));
                }
                forgotten.insert(*id);
            }
        }
    }

    let mut view: Vec<(usize, Event)> = Vec::new();
    for (index, event) in log.iter().enumerate() {
        if forgotten.contains(&event.id) && !matches!(event.payload, EventPayload::Condensation(_)) {
            continue;
        }
        match &event.payload {
            EventPayload::Condensation(c) => {
                if forgotten.contains(&event.id) {
                    continue;
                }
                let summary = Event {
                    id: event.id,
                    timestamp: event.timestamp,
                    source: event.source,
                    payload: EventPayload::CondensationSummary(CondensationSummaryEvent {
                        summary: c.summary.clone(),
                    }),
                };
                view.push((slot[&event.id], summary));
            }
            payload if payload.is_llm_convertible() => view.push((index, event.clone())),
            _ => {}
        }
    }
    view.sort_by_key(|(position, _)| *position);
    Ok(view.into_iter().map(|(_, e)| e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{
        ActionEvent, Condensation, EventSource, ObservationEvent, SystemPromptEvent,
    };
    use crate::security::RiskLevel;
    use proptest::prelude::*;
    use serde_json::json;

    fn msg(text: &str) -> Event {
        Event::user_message(text)
    }

    fn condensation(forgotten: &[&Event], summary: &str) -> Event {
        Event::new(
            EventSource::System,
            EventPayload::Condensation(Condensation {
                forgotten_event_ids: forgotten.iter().map(|e| e.id).collect(),
                summary: summary.into(),
                anchor: forgotten[0].id,
            }),
        )
    }

    fn summary_text(event: &Event) -> Option<&str> {
        match &event.payload {
            EventPayload::CondensationSummary(s) => Some(&s.summary),
            _ => None,
        }
    }

    #[test]
    fn empty_log_gives_no_messages() {
        assert!(to_llm_messages(&[]).unwrap().is_empty());
    }

    #[test]
    fn system_then_user() {
        let system = Event::new(
            EventSource::Agent,
            EventPayload::SystemPrompt(SystemPromptEvent { prompt: "sys".into(), tools: vec![] }),
        );
        let messages = to_llm_messages(&[system, msg("hi")]).unwrap();
        assert_eq!(messages, vec![Message::system("sys"), Message::user("hi")]);
    }

    #[test]
    fn action_and_observation_pair_up() {
        let action = Event::new(
            EventSource::Agent,
            EventPayload::Action(ActionEvent {
                tool_name: "bash".into(),
                tool_call_id: "call_1".into(),
                arguments: json!({"command": "ls"}),
                thought: Some("listing".into()),
                security_risk: RiskLevel::Low,
            }),
        );
        let obs = Event::new(
            EventSource::Environment,
            EventPayload::Observation(ObservationEvent {
                tool_call_id: "call_1".into(),
                tool_name: "bash".into(),
                result: json!({"exit_code": 0}),
                llm_text: "a.txt".into(),
                is_error: false,
            }),
        );
        let messages = to_llm_messages(&[action, obs]).unwrap();
        assert_eq!(messages[0].role, Role::Assistant);
        assert_eq!(messages[0].tool_calls[0].id, "call_1");
        assert_eq!(messages[1].role, Role::Tool);
        assert_eq!(messages[1].tool_call_id.as_deref(), Some("call_1"));
        assert!(messages.iter().all(Message::is_well_formed));
    }

    #[test]
    fn internal_events_are_rejected() {
        let pause = Event::new(EventSource::User, EventPayload::Pause);
        assert!(matches!(to_llm_messages(&[pause]), Err(ViewError::NonConvertibleEvent { kind: "pause", .. })));
    }

    #[test]
    fn summary_renders_as_user_message() {
        let s = Event::new(
            EventSource::System,
            EventPayload::CondensationSummary(CondensationSummaryEvent { summary: "S".into() }),
        );
        let m = to_llm_messages(&[s]).unwrap();
        assert_eq!(m, vec![Message::user("Summary of earlier events:\nS")]);
    }

    #[test]
    fn single_condensation_replaces_span() {
        let e: Vec<Event> = (0..4).map(|i| msg(&format!("e{i}"))).collect();
        let c = condensation(&[&e[1], &e[2]], "S");
        let mut log = e.clone();
        log.push(c);
        let view = apply_condensations(&log).unwrap();
        assert_eq!(view.len(), 3);
        assert_eq!(view[0], e[0]);
        assert_eq!(summary_text(&view[1]), Some("S"));
        assert_eq!(view[2], e[3]);
        assert_eq!(log.len(), 5);
    }

    #[test]
    fn no_condensation_drops_internal_only() {
        let log = vec![msg("a"), Event::new(EventSource::User, EventPayload::Pause), msg("b")];
        let view = apply_condensations(&log).unwrap();
        assert_eq!(view, vec![log[0].clone(), log[2].clone()]);
    }

    #[test]
    fn dangling_forgotten_id() {
        let ghost = msg("ghost");
        let log = vec![msg("a"), condensation(&[&ghost], "S")];
        assert_eq!(apply_condensations(&log), Err(ViewError::DanglingForgottenId(ghost.id)));
    }

    #[test]
    fn later_condensation_can_forget_earlier_summary() {
        let e: Vec<Event> = (0..6).map(|i| msg(&format!("e{i}"))).collect();
        let c1 = condensation(&[&e[1], &e[2]], "S1");
        let mut log = e.clone();
        log.push(c1.clone());
        // second forgets the first summary and the survivor after it
        let c2 = Event::new(
            EventSource::System,
            EventPayload::Condensation(Condensation {
                forgotten_event_ids: vec![c1.id, e[3].id],
                summary: "S2".into(),
                anchor: c1.id,
            }),
        );
        log.push(c2);
        let view = apply_condensations(&log).unwrap();
        let rendered: Vec<String> = view
            .iter()
            .map(|ev| summary_text(ev).map(str::to_owned).unwrap_or_else(|| match &ev.payload {
                EventPayload::Message(m) => m.text(),
                _ => unreachable!(),
            }))
            .collect();
        assert_eq!(rendered, vec!["e0", "S2", "e4", "e5"]);
    }

    /// Reference semantics: replay the log, applying each condensation to the
    /// view built so far.
    fn sequential_oracle(log: &[Event]) -> Vec<Event> {
        let mut view: Vec<Event> = Vec::new();
        for event in log {
            match &event.payload {
                EventPayload::Condensation(c) => {
                    let position = view.iter().position(|v| v.id == c.anchor).expect("anchor visible");
                    let survivors_before = view[..position]
                        .iter()
                        .filter(|v| !c.forgotten_event_ids.contains(&v.id))
                        .count();
                    view.retain(|v| !c.forgotten_event_ids.contains(&v.id));
                    view.insert(
                        survivors_before,
                        Event {
                            id: event.id,
                            timestamp: event.timestamp,
                            source: event.source,
                            payload: EventPayload::CondensationSummary(CondensationSummaryEvent {
                                summary: c.summary.clone(),
                            }),
                        },
                    );
                }
                p if p.is_llm_convertible() => view.push(event.clone()),
                _ => {}
            }
        }
        view
    }

    /// Builds a log from a script of operations. `Some(picks)` is a
    /// condensation forgetting the visible events at the given view indices.
    fn build_log(script: &[Option<Vec<usize>>]) -> Vec<Event> {
        let mut log = Vec::new();
        let mut visible: Vec<EventId> = Vec::new();
        for (step, op) in script.iter().enumerate() {
            match op {
                None => {
                    let e = if step % 5 == 4 {
                        Event::new(EventSource::User, EventPayload::Pause)
                    } else {
                        msg(&format!("m{step}"))
                    };
                    if e.payload.is_llm_convertible() {
                        visible.push(e.id);
                    }
                    log.push(e);
                }
                Some(picks) => {
                    if visible.is_empty() {
                        continue;
                    }
                    let mut chosen: Vec<usize> = picks.iter().map(|p| p % visible.len()).collect();
                    chosen.sort_unstable();
                    chosen.dedup();
                    let forgotten: Vec<EventId> = chosen.iter().map(|&i| visible[i]).collect();
                    let c = Event::new(
                        EventSource::System,
                        EventPayload::Condensation(Condensation {
                            forgotten_event_ids: forgotten.clone(),
                            summary: format!("s{step}"),
                            anchor: forgotten[0],
                        }),
                    );
                    let first = chosen[0];
                    visible.retain(|id| !forgotten.contains(id));
                    visible.insert(first, c.id);
                    log.push(c);
                }
            }
        }
        log
    }

    fn script() -> impl Strategy<Value = Vec<Option<Vec<usize>>>> {
        prop::collection::vec(
            prop_oneof![
                4 => Just(None),
                1 => prop::collection::vec(0usize..64, 1..5).prop_map(Some),
            ],
            0..60,
        )
    }

    proptest! {
        #[test]
        fn matches_sequential_application(script in script()) {
            let log = build_log(&script);
            let view = apply_condensations(&log).unwrap();
            prop_assert_eq!(&view, &sequential_oracle(&log));
        }

        #[test]
        fn idempotent_and_never_leaks_forgotten(script in script()) {
            let log = build_log(&script);
            let view = apply_condensations(&log).unwrap();
            prop_assert_eq!(apply_condensations(&view).unwrap(), view.clone());
            let forgotten: HashSet<EventId> = log.iter().filter_map(|e| match &e.payload {
                EventPayload::Condensation(c) => Some(c.forgotten_event_ids.clone()),
                _ => None,
            }).flatten().collect();
            prop_assert!(view.iter().all(|e| !forgotten.contains(&e.id)));
        }

        #[test]
        fn message_count_preserved_without_condensation(n in 0usize..40) {
            let log: Vec<Event> = (0..n).map(|i| msg(&i.to_string())).collect();
            let messages = to_llm_messages(&log).unwrap();
            prop_assert_eq!(messages.len(), n);
            for (i, m) in messages.iter().enumerate() {
                prop_assert_eq!(m.text_content(), i.to_string());
            }
        }
    }
}
