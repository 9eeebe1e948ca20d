//! Synthetic conversation logs shared by the benchmarks.

use agentrt::events::{
    ActionEvent, Condensation, Event, EventPayload, EventSource, MessageEvent, MessageRole, ObservationEvent,
    SystemPromptEvent,
};
use agentrt::RiskLevel;
use serde_json::json;

/// A log of a system prompt, one user message and `turns` bash call/result
/// pairs. Outputs are `output_bytes` long.
pub fn synthetic_log(turns: usize, output_bytes: usize) -> Vec<Event> {
    let mut log = vec![
        Event::new(
            EventSource::System,
            EventPayload::SystemPrompt(SystemPromptEvent { prompt: "You are an agent.".into(), tools: vec![] }),
        ),
        Event::user_message("Fix the failing test in src/lib.rs."),
    ];
    let line = "test result: ok. 12 passed; 0 failed\n";
    let output: String = line.repeat(output_bytes / line.len() + 1)[..output_bytes].to_string();
    for turn in 0..turns {
        let call = format!("call_{turn}");
        log.push(Event::new(
            EventSource::Agent,
            EventPayload::Action(ActionEvent {
                tool_name: "bash".into(),
                tool_call_id: call.clone(),
                arguments: json!({"command": format!("cargo test -- case_{turn}")}),
                thought: Some("Run the next case.".into()),
                security_risk: RiskLevel::Low,
            }),
        ));
        log.push(Event::new(
            EventSource::Environment,
            EventPayload::Observation(ObservationEvent {
                tool_call_id: call,
                tool_name: "bash".into(),
                result: json!({"exit_code": 0, "stdout": output, "stderr": "", "duration_ms": 40}),
                llm_text: format!("{output}\n[exit code: 0]"),
                is_error: false,
            }),
        ));
    }
    log
}

/// Appends a condensation forgetting the events in `range` (which must hold
/// whole call/result pairs) and a closing assistant message.
pub fn condensed(mut log: Vec<Event>, range: std::ops::Range<usize>) -> Vec<Event> {
    let forgotten: Vec<_> = log[range.clone()].iter().map(|e| e.id).collect();
    log.push(Event::new(
        EventSource::System,
        EventPayload::Condensation(Condensation {
            anchor: forgotten[0],
            forgotten_event_ids: forgotten,
            summary: "Ran the first batch of cases; all passed.".into(),
        }),
    ));
    log.push(Event::new(
        EventSource::Agent,
        EventPayload::Message(MessageEvent { role: MessageRole::Assistant, content: vec![] }),
    ));
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use agentrt::events::{apply_condensations, to_llm_messages};

    #[test]
    fn logs_are_well_formed() {
        let log = synthetic_log(10, 100);
        assert_eq!(log.len(), 22);
        assert_eq!(to_llm_messages(&log).unwrap().len(), 22);
        let view = apply_condensations(&condensed(log, 2..12)).unwrap();
        to_llm_messages(&view).unwrap();
        assert!(view.len() < 22);
    }
}
