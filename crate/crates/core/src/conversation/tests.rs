use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::json;

use super::*;
use crate::events::EventPayload;
use crate::llm::{LlmProfile, LlmResponse, ScriptedBackend, ScriptedReply};
use crate::security::SecurityAnalyzer;

struct Setup {
    conversation: LocalConversation,
    backend: Arc<ScriptedBackend>,
    dir: tempfile::TempDir,
}

fn setup_with(config: AgentConfig, backend: ScriptedBackend, options: ConversationOptions) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let backend = Arc::new(backend);
    let llms = LlmRegistry::new();
    llms.register_backend("scripted", backend.clone());
    let workspace = Workspace::local(dir.path().join("work")).unwrap();
    let options = options.with_llms(llms);
    let conversation = LocalConversation::new(config, workspace, options).unwrap();
    Setup { conversation, backend, dir }
}

fn config() -> AgentConfig {
    AgentConfig::new(LlmProfile::new("scripted")).with_tools(["bash", "finish"])
}

fn setup(replies: Vec<ScriptedReply>) -> Setup {
    setup_with(config(), ScriptedBackend::new(replies), ConversationOptions::default())
}

fn bash(id: &str, command: &str) -> ScriptedReply {
    LlmResponse::tool_call(id, "bash", json!({"command": command})).into()
}

fn risky(id: &str, command: &str) -> ScriptedReply {
    LlmResponse::tool_call(id, "bash", json!({"command": command, "security_risk": "high"})).into()
}

fn kinds(c: &LocalConversation) -> Vec<&'static str> {
    c.events().unwrap().iter().map(Event::kind).collect()
}

fn gated_setup(replies: Vec<ScriptedReply>) -> Setup {
    let config = config().with_security_analyzer(SecurityAnalyzer::Llm);
    let options = ConversationOptions::default().with_confirmation_policy(ConfirmationPolicy::confirm_risky());
    setup_with(config, ScriptedBackend::new(replies), options)
}

#[test]
fn factory_picks_local_for_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let conversation = Conversation::at_path(config(), dir.path()).unwrap();
    assert!(!conversation.is_remote());
    assert_eq!(conversation.status().unwrap(), AgentStatus::Idle);
}

#[test]
fn factory_reports_unreachable_server() {
    let workspace = crate::workspace::RemoteWorkspace::new("http://127.0.0.1:9", Some("k"), "workspace/project");
    let err = Conversation::new(config(), workspace).unwrap_err();
    assert!(matches!(err, ConversationError::ServerUnreachable(_)), "{err:?}");
}

#[test]
fn two_step_transcript_finishes() {
    let s = setup(vec![bash("a", "echo hi"), LlmResponse::text("done").into()]);
    s.conversation.send_message("say hi").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Finished);
    assert_eq!(s.backend.call_count(), 2);
    let k = kinds(&s.conversation);
    assert_eq!(k[0], "system_prompt");
    assert_eq!(k.iter().filter(|k| **k == "observation").count(), 1);
    assert_eq!(s.conversation.final_message().unwrap().as_deref(), Some("done"));
    assert_eq!(s.conversation.base().unwrap().title.as_deref(), Some("say hi"));
}

#[test]
fn max_iterations_bounds_model_calls() {
    let looping = ScriptedBackend::from_fn(|i, _| Ok(LlmResponse::tool_call(format!("c{i}"), "bash", json!({"command": format!("echo {i}")}))));
    let s = setup_with(config().with_max_iterations(1), looping, ConversationOptions::default());
    s.conversation.send_message("loop").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Idle);
    assert_eq!(s.backend.call_count(), 1);
    assert_eq!(kinds(&s.conversation).iter().filter(|k| **k == "observation").count(), 1);
}

#[test]
fn reopening_a_finished_conversation() {
    let s = setup(vec![LlmResponse::text("one").into(), LlmResponse::text("two").into()]);
    s.conversation.send_message("first").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Finished);
    s.conversation.send_message("second").unwrap();
    assert_eq!(s.conversation.status().unwrap(), AgentStatus::Idle);
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Finished);
    assert_eq!(s.conversation.final_message().unwrap().as_deref(), Some("two"));
}

#[test]
fn await_user_after_reply_leaves_idle() {
    let mut config = config();
    config.await_user_after_reply = true;
    let s = setup_with(config, ScriptedBackend::new(vec![LlmResponse::text("hi")]), ConversationOptions::default());
    s.conversation.send_message("hello").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Idle);
}

#[test]
fn approve_executes_the_pending_action() {
    let s = gated_setup(vec![risky("a", "echo approved"), LlmResponse::text("ok").into()]);
    s.conversation.send_message("go").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::WaitingForConfirmation);
    assert!(!kinds(&s.conversation).contains(&"observation"));
    // Running again without a decision returns at once.
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::WaitingForConfirmation);
    assert_eq!(s.backend.call_count(), 1);
    assert_eq!(s.conversation.confirm(ConfirmationDecision::Approve, None).unwrap(), AgentStatus::Finished);
    let events = s.conversation.events().unwrap();
    let obs = events.iter().find_map(|e| match &e.payload {
        EventPayload::Observation(o) => Some(o.clone()),
        _ => None,
    });
    assert_eq!(obs.unwrap().result["stdout"], "approved\n");
}

#[test]
fn reject_reaches_the_next_request() {
    let s = gated_setup(vec![risky("a", "rm -rf /tmp/x"), LlmResponse::text("fine").into()]);
    s.conversation.send_message("go").unwrap();
    s.conversation.run().unwrap();
    let status = s.conversation.confirm(ConfirmationDecision::Reject, Some("too dangerous".into())).unwrap();
    assert_eq!(status, AgentStatus::Finished);
    assert!(kinds(&s.conversation).contains(&"user_reject"));
    assert!(!kinds(&s.conversation).contains(&"observation"));
    let request = &s.backend.requests()[1];
    let tool_messages: Vec<_> = request["messages"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|m| m["role"] == "tool")
        .collect();
    assert_eq!(tool_messages.len(), 1);
    assert!(tool_messages[0]["content"].to_string().contains("too dangerous"));
}

#[test]
fn confirm_without_pending_action() {
    let s = setup(vec![LlmResponse::text("x").into()]);
    assert!(matches!(
        s.conversation.confirm(ConfirmationDecision::Approve, None),
        Err(ConversationError::NoPendingAction)
    ));
}

#[test]
fn policy_change_mid_session() {
    let config = config();
    let options = ConversationOptions::default().with_confirmation_policy(ConfirmationPolicy::AlwaysConfirm);
    let s = setup_with(
        config,
        ScriptedBackend::new(vec![bash("a", "echo 1"), bash("b", "echo 2"), LlmResponse::text("done").into()]),
        options,
    );
    s.conversation.send_message("go").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::WaitingForConfirmation);
    s.conversation.set_confirmation_policy(ConfirmationPolicy::NeverConfirm).unwrap();
    assert_eq!(s.conversation.confirm(ConfirmationDecision::Approve, None).unwrap(), AgentStatus::Finished);
    assert_eq!(kinds(&s.conversation).iter().filter(|k| **k == "observation").count(), 2);
}

#[test]
fn pause_before_run() {
    let s = setup(vec![LlmResponse::text("never").into()]);
    s.conversation.send_message("hi").unwrap();
    s.conversation.pause();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Paused);
    assert_eq!(s.backend.call_count(), 0);
    assert_eq!(kinds(&s.conversation).iter().filter(|k| **k == "pause").count(), 1);
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Finished);
}

#[test]
fn pause_during_run_stops_between_steps() {
    let conversation: Arc<Mutex<Option<LocalConversation>>> = Arc::default();
    let handle = conversation.clone();
    let backend = ScriptedBackend::from_fn(move |i, _| {
        if i == 2 {
            handle.lock().unwrap().as_ref().unwrap().pause();
        }
        Ok(LlmResponse::tool_call(format!("c{i}"), "bash", json!({"command": format!("echo {i}")})))
    });
    let s = setup_with(config(), backend, ConversationOptions::default());
    *conversation.lock().unwrap() = Some(s.conversation.clone());
    s.conversation.send_message("go").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Paused);
    let events = s.conversation.events().unwrap();
    assert!(crate::security::first_unmatched_action(&events).is_none());
    let k: Vec<_> = events.iter().map(Event::kind).filter(|k| *k != "state_update").collect();
    assert_eq!(k.last(), Some(&"pause"));
    assert_eq!(k.iter().filter(|k| **k == "observation").count(), 3);
}

#[test]
fn concurrent_run_is_rejected() {
    let gate = Arc::new((Mutex::new(false), std::sync::Condvar::new()));
    let wait = gate.clone();
    let backend = ScriptedBackend::from_fn(move |_, _| {
        let (lock, cv) = &*wait;
        let mut released = lock.lock().unwrap();
        while !*released {
            released = cv.wait(released).unwrap();
        }
        Ok(LlmResponse::text("done"))
    });
    let s = setup_with(config(), backend, ConversationOptions::default());
    s.conversation.send_message("go").unwrap();
    let runner = s.conversation.clone();
    let t = std::thread::spawn(move || runner.run());
    while !s.conversation.is_running() {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(matches!(s.conversation.run(), Err(ConversationError::AlreadyRunning)));
    // A message sent mid-run is queued, not lost.
    s.conversation.send_message("later").unwrap();
    *gate.0.lock().unwrap() = true;
    gate.1.notify_all();
    assert_eq!(t.join().unwrap().unwrap(), AgentStatus::Finished);
    let texts: Vec<String> = s
        .conversation
        .events()
        .unwrap()
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::Message(m) => Some(m.text()),
            _ => None,
        })
        .collect();
    assert_eq!(texts, vec!["go", "done", "later"]);
    assert_eq!(s.conversation.status().unwrap(), AgentStatus::Idle);
}

#[test]
fn subscribers_see_every_event_in_order() {
    let s = setup(vec![bash("a", "echo 1"), LlmResponse::text("done").into()]);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    let id = s.conversation.subscribe(move |i, _| sink.lock().unwrap().push(i));
    s.conversation.send_message("go").unwrap();
    s.conversation.run().unwrap();
    let n = s.conversation.events().unwrap().len();
    assert_eq!(*seen.lock().unwrap(), (0..n).collect::<Vec<_>>());
    s.conversation.unsubscribe(id);
    s.conversation.send_message("more").unwrap();
    assert_eq!(seen.lock().unwrap().len(), n);
}

#[test]
fn stuck_loop_is_detected() {
    let backend = ScriptedBackend::from_fn(|i, _| Ok(LlmResponse::tool_call(format!("c{i}"), "bash", json!({"command": "echo same"}))));
    let s = setup_with(config(), backend, ConversationOptions::default());
    s.conversation.send_message("go").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Stuck);
    assert_eq!(s.backend.call_count(), 3);
}

#[test]
fn persisted_conversation_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let persist = dir.path().join("conv");
    let backend = Arc::new(ScriptedBackend::new(vec![bash("a", "echo 1"), LlmResponse::text("done").into()]));
    let llms = LlmRegistry::new();
    llms.register_backend("scripted", backend.clone());
    let workspace = Workspace::local(dir.path().join("work")).unwrap();
    let options = ConversationOptions::default().with_llms(llms.clone()).with_persistence_dir(&persist);
    let first = LocalConversation::new(config(), workspace.clone(), options).unwrap();
    first.send_message("go").unwrap();
    first.pause();
    assert_eq!(first.run().unwrap(), AgentStatus::Paused);
    let before = first.events().unwrap();
    drop(first);

    let options = ConversationOptions::default().with_llms(llms);
    let resumed = LocalConversation::resume(config(), workspace, &persist, options).unwrap();
    assert_eq!(resumed.events().unwrap(), before);
    assert_eq!(resumed.run().unwrap(), AgentStatus::Finished);
    assert_eq!(backend.call_count(), 2);
}

#[test]
fn delegate_runs_children() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let backend = ScriptedBackend::from_fn(move |_, request| {
        counter.fetch_add(1, Ordering::SeqCst);
        let text = serde_json::to_string(&request.messages).unwrap();
        let has_tool_result = request.messages.iter().any(|m| m.tool_call_id.is_some());
        if text.contains("parent task") {
            if has_tool_result {
                Ok(LlmResponse::text("parent done"))
            } else {
                Ok(LlmResponse::tool_call("d", "delegate", json!({"tasks": ["child one", "child two"]})))
            }
        } else if text.contains("child one") {
            Ok(LlmResponse::text("one finished"))
        } else {
            Ok(LlmResponse::text("two finished"))
        }
    });
    let config = AgentConfig::new(LlmProfile::new("scripted")).with_tools(["bash", "delegate"]);
    let dir_holder = tempfile::tempdir().unwrap();
    let options = ConversationOptions::default().with_persistence_dir(dir_holder.path().join("parent"));
    let s = setup_with(config, backend, options);
    s.conversation.send_message("parent task").unwrap();
    assert_eq!(s.conversation.run().unwrap(), AgentStatus::Finished);
    let events = s.conversation.events().unwrap();
    let report = events
        .iter()
        .find_map(|e| match &e.payload {
            EventPayload::Observation(o) if o.tool_name == "delegate" => Some(o.llm_text.clone()),
            _ => None,
        })
        .unwrap();
    assert!(report.contains("one finished"), "{report}");
    assert!(report.contains("two finished"), "{report}");
    assert_eq!(calls.load(Ordering::SeqCst), 4);
    let children = std::fs::read_dir(dir_holder.path().join("parent/children")).unwrap().count();
    assert_eq!(children, 2);
    drop(s.dir);
}

#[test]
fn titles_use_the_title_model_when_configured() {
    let mut config = config();
    config.title_llm = Some(LlmProfile::new("titler"));
    let titler = Arc::new(ScriptedBackend::new(vec![LlmResponse::text("Greeting")]));
    let llms = LlmRegistry::new();
    llms.register_backend("titler", titler);
    let dir = tempfile::tempdir().unwrap();
    let workspace = Workspace::local(dir.path()).unwrap();
    let c = LocalConversation::new(config, workspace, ConversationOptions::default().with_llms(llms)).unwrap();
    c.send_message("hello there").unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while c.base().unwrap().title.is_none() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(c.base().unwrap().title.as_deref(), Some("Greeting"));
}
