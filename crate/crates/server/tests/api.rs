mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use tungstenite::Message as WsMessage;

use agentrt::conversation::{ConversationOptions, RemoteConversation};
use agentrt::events::{EventPayload, MessageRole};
use agentrt::llm::{ChatBackend, ChatRequest, LlmError, LlmProfile, LlmResponse, ScriptedBackend, ScriptedReply};
use agentrt::security::ConfirmationDecision;
use agentrt::workspace::{ApiError, WorkspaceError};
use agentrt::{AgentConfig, AgentStatus, Conversation, ConversationError, ConfirmationPolicy, Workspace};
use common::*;

fn config(model: &str) -> AgentConfig {
    AgentConfig::new(LlmProfile::new(model)).with_tools(["bash", "finish"])
}

fn bash(id: &str, command: &str) -> ScriptedReply {
    LlmResponse::tool_call(id, "bash", json!({ "command": command })).into()
}

fn text(t: &str) -> ScriptedReply {
    LlmResponse::text(t).into()
}

fn create(server: &TestServer, agent: Value) -> String {
    let reply = server.client().post_json("/conversations", &json!({ "agent": agent })).unwrap();
    reply["id"].as_str().unwrap().to_string()
}

fn status_of(err: ApiError) -> (u16, Value) {
    match err {
        ApiError::Status { status, body } => (status, serde_json::from_str(&body).unwrap_or(Value::Null)),
        other => panic!("expected an HTTP status, got {other:?}"),
    }
}

fn remote(server: &TestServer, config: AgentConfig) -> RemoteConversation {
    match Conversation::with_options(config, Workspace::Remote(server.workspace()), ConversationOptions::default())
        .unwrap()
    {
        Conversation::Remote(c) => c.with_run_timeout(Duration::from_secs(30)),
        Conversation::Local(_) => unreachable!(),
    }
}

fn read_frames_until_end(socket: &mut tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>) -> Vec<String> {
    let mut frames = Vec::new();
    loop {
        match socket.read().unwrap() {
            WsMessage::Text(t) => {
                let text = t.to_string();
                let v: Value = serde_json::from_str(&text).unwrap();
                frames.push(text);
                let event = &v["event"];
                let ended = event["kind"] == "state_update"
                    && event["field"] == "agent_status"
                    && event["value"] != "running";
                if ended {
                    return frames;
                }
            }
            WsMessage::Close(_) => return frames,
            _ => {}
        }
    }
}

#[test]
fn create_answers_201_with_an_idle_record() {
    let server = TestServer::start();
    let response = ureq::post(&format!("{}/conversations", server.url()))
        .set("Authorization", &format!("Bearer {KEY}"))
        .send_json(json!({ "agent": { "llm": { "model": "m" }, "tools": ["bash"] } }))
        .unwrap();
    assert_eq!(response.status(), 201);
    let record: Value = response.into_json().unwrap();
    let id = record["id"].as_str().unwrap();
    assert_eq!(record["agent_status"], "idle");
    let fetched = server.client().get_json(&format!("/conversations/{id}")).unwrap();
    assert_eq!(fetched["conversation_id"], id);
    assert_eq!(fetched["agent"]["tool_specs"][0]["name"], "bash");
    assert!(server.conversation_dir(id).join("record.json").exists());
}

#[test]
fn unknown_tool_is_rejected_naming_it_and_the_registered_tools() {
    let server = TestServer::start();
    let err = server
        .client()
        .post_json("/conversations", &json!({ "agent": { "llm": { "model": "m" }, "tools": ["frob"] } }))
        .unwrap_err();
    let (status, body) = status_of(err);
    assert_eq!(status, 400);
    let message = body["message"].as_str().unwrap();
    assert!(message.contains("frob") && message.contains("bash") && message.contains("file_editor"), "{message}");
    assert!(server.client().get_json("/conversations").unwrap().as_array().unwrap().is_empty());
}

#[test]
fn every_route_requires_the_key() {
    let server = TestServer::start();
    let id = create(&server, json!({ "llm": { "model": "m" }, "tools": ["bash"] }));
    for key in [None, Some("wrong")] {
        let client = server.client_with_key(key);
        for (method, path) in [
            ("GET", "/health".to_string()),
            ("GET", "/conversations".to_string()),
            ("GET", format!("/conversations/{id}")),
            ("GET", format!("/conversations/{id}/events")),
            ("POST", format!("/conversations/{id}/run")),
            ("POST", format!("/conversations/{id}/pause")),
            ("DELETE", format!("/conversations/{id}")),
        ] {
            let (status, body) = status_of(client.send_json(method, &path, None).unwrap_err());
            assert_eq!((status, body["error"].as_str()), (401, Some("unauthorized")), "{method} {path}");
        }
        let err = client.post_json("/execute", &json!({ "command": "true" })).unwrap_err();
        assert_eq!(status_of(err).0, 401);
        assert_eq!(status_of(client.get_bytes("/files", &[("path", "x")]).unwrap_err()).0, 401);
        let url = client.ws_url(&format!("/conversations/{id}/events"), &[]);
        match tungstenite::connect(url.as_str()) {
            Err(tungstenite::Error::Http(response)) => assert_eq!(response.status().as_u16(), 401),
            other => panic!("upgrade without the key: {:?}", other.map(|_| ())),
        }
    }
    assert_eq!(server.client().get_json("/health").unwrap()["status"], "ok");
}

#[test]
fn unknown_conversation_is_404_and_its_stream_closes() {
    let server = TestServer::start();
    assert_eq!(status_of(server.client().get_json("/conversations/nope").unwrap_err()).0, 404);
    assert_eq!(status_of(server.client().send_json("POST", "/conversations/nope/run", None).unwrap_err()).0, 404);
    let mut socket = server.connect_ws("nope", 0);
    match socket.read().unwrap() {
        WsMessage::Close(Some(frame)) => assert_eq!(u16::from(frame.code), 4404),
        other => panic!("expected close, got {other:?}"),
    }
}

#[test]
fn listing_shows_every_conversation() {
    let server = TestServer::start();
    let a = create(&server, json!({ "llm": { "model": "m" } }));
    let b = create(&server, json!({ "llm": { "model": "m" } }));
    let list = server.client().get_json("/conversations").unwrap();
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 2);
    assert!(ids.contains(&a.as_str()) && ids.contains(&b.as_str()));
}

#[test]
fn chosen_ids_are_validated_and_unique() {
    let server = TestServer::start();
    let body = json!({ "agent": { "llm": { "model": "m" } }, "conversation_id": "mine" });
    assert_eq!(server.client().post_json("/conversations", &body).unwrap()["id"], "mine");
    assert_eq!(status_of(server.client().post_json("/conversations", &body).unwrap_err()).0, 409);
    let bad = json!({ "agent": { "llm": { "model": "m" } }, "conversation_id": "../up" });
    assert_eq!(status_of(server.client().post_json("/conversations", &bad).unwrap_err()).0, 400);
}

#[test]
fn message_then_run_streams_the_assistant_events() {
    let server = TestServer::start();
    let backend = server.backend("s1", ScriptedBackend::new(vec![bash("c1", "echo hi"), text("done")]));
    let conversation = remote(&server, config("s1"));
    conversation.send_message("say hi").unwrap();
    assert_eq!(conversation.run().unwrap(), AgentStatus::Finished);
    let events = conversation.events().unwrap();
    assert!(events.iter().any(|e| matches!(&e.payload, EventPayload::Observation(o) if o.llm_text.contains("hi"))));
    let last_message = events.iter().rev().find_map(|e| match &e.payload {
        EventPayload::Message(m) if m.role == MessageRole::Assistant => Some(m.text()),
        _ => None,
    });
    assert_eq!(last_message.as_deref(), Some("done"));
    assert_eq!(backend.call_count(), 2);
    assert!(wait_until(Duration::from_secs(5), || conversation.streamed_events().len() == events.len()));
    assert_eq!(conversation.streamed_events(), events);
    let record = server.client().get_json(&format!("/conversations/{}", conversation.id())).unwrap();
    assert_eq!(record["agent_status"], "finished");
    assert_eq!(record["title"], "say hi");
}

#[test]
fn confirmation_without_a_pending_action_is_409() {
    let server = TestServer::start();
    let id = create(&server, json!({ "llm": { "model": "m" } }));
    let err = server
        .client()
        .post_json(&format!("/conversations/{id}/confirmation"), &json!({ "decision": "approve" }))
        .unwrap_err();
    let (status, body) = status_of(err);
    assert_eq!((status, body["error"].as_str()), (409, Some("no_pending_action")));
}

#[test]
fn approval_over_the_wire_runs_the_held_action() {
    let server = TestServer::start();
    let risky = LlmResponse::tool_call("c1", "bash", json!({ "command": "echo approved", "security_risk": "high" }));
    server.backend("s2", ScriptedBackend::new(vec![risky.into(), text("ok")]));
    let config = config("s2").with_security_analyzer(agentrt::security::SecurityAnalyzer::Llm);
    let options = ConversationOptions::default().with_confirmation_policy(ConfirmationPolicy::confirm_risky());
    let Conversation::Remote(conversation) =
        Conversation::with_options(config, Workspace::Remote(server.workspace()), options).unwrap()
    else {
        unreachable!()
    };
    conversation.send_message("go").unwrap();
    assert_eq!(conversation.run().unwrap(), AgentStatus::WaitingForConfirmation);
    assert!(!conversation.events().unwrap().iter().any(|e| matches!(e.payload, EventPayload::Observation(_))));
    assert_eq!(conversation.confirm(ConfirmationDecision::Approve, None).unwrap(), AgentStatus::Finished);
    let events = conversation.events().unwrap();
    assert!(events.iter().any(|e| matches!(&e.payload, EventPayload::Observation(o) if o.llm_text.contains("approved"))));
}

struct Gate(Mutex<bool>, Condvar);

impl Gate {
    fn wait(&self) {
        let mut open = self.0.lock().unwrap();
        while !*open {
            open = self.1.wait(open).unwrap();
        }
    }

    fn open(&self) {
        *self.0.lock().unwrap() = true;
        self.1.notify_all();
    }
}

#[test]
fn a_second_run_is_409_while_the_first_is_active() {
    let server = TestServer::start();
    let gate = Arc::new(Gate(Mutex::new(false), Condvar::new()));
    let hook_gate = gate.clone();
    server.backend("s3", ScriptedBackend::new(vec![text("done")]).with_hook(move |_, _| hook_gate.wait()));
    let id = create(&server, serde_json::to_value(config("s3")).unwrap());
    let client = server.client();
    client.post_json(&format!("/conversations/{id}/messages"), &json!({ "content": [{ "type": "text", "text": "hi" }] })).unwrap();
    let first = client.send_json("POST", &format!("/conversations/{id}/run"), None).unwrap();
    assert!(first["since"].as_u64().is_some());
    let (status, body) = status_of(client.send_json("POST", &format!("/conversations/{id}/run"), None).unwrap_err());
    assert_eq!((status, body["error"].as_str()), (409, Some("already_running")));
    gate.open();
    assert!(wait_until(Duration::from_secs(10), || {
        client.get_json(&format!("/conversations/{id}")).unwrap()["agent_status"] == "finished"
    }));
}

#[test]
fn pause_stops_a_running_conversation() {
    let server = TestServer::start();
    server.backend(
        "s4",
        ScriptedBackend::from_fn(|i, _| Ok(LlmResponse::tool_call(format!("c{i}"), "bash", json!({ "command": format!("echo {i}") }))))
            .with_hook(|_, _| thread::sleep(Duration::from_millis(20))),
    );
    let conversation = remote(&server, config("s4").with_max_iterations(1000));
    conversation.send_message("loop").unwrap();
    let runner = {
        let c = conversation.clone();
        thread::spawn(move || c.run())
    };
    assert!(wait_until(Duration::from_secs(10), || conversation.streamed_events().len() > 8));
    conversation.pause().unwrap();
    assert_eq!(runner.join().unwrap().unwrap(), AgentStatus::Paused);
    let events = conversation.events().unwrap();
    assert!(events.iter().any(|e| matches!(e.payload, EventPayload::Pause)));
    assert_eq!(conversation.status().unwrap(), AgentStatus::Paused);
}

#[test]
fn secrets_patched_over_the_api_never_leave_the_server() {
    const SECRET: &str = "s3cr3t-value-8841";
    let server = TestServer::start();
    let backend = server.backend("s5", ScriptedBackend::new(vec![bash("c1", "echo token=$API_TOKEN"), text("done")]));
    let conversation = remote(&server, config("s5"));
    let frames = Arc::new(Mutex::new(Vec::new()));
    let sink = frames.clone();
    conversation.subscribe(move |_, event| sink.lock().unwrap().push(serde_json::to_string(event).unwrap()));
    conversation.update_secrets(&BTreeMap::from([("API_TOKEN".to_string(), SECRET.to_string())])).unwrap();
    conversation.send_message("print the token").unwrap();
    assert_eq!(conversation.run().unwrap(), AgentStatus::Finished);
    let events = conversation.events().unwrap();
    let observation = events
        .iter()
        .find_map(|e| match &e.payload {
            EventPayload::Observation(o) => Some(o.llm_text.clone()),
            _ => None,
        })
        .unwrap();
    assert!(observation.contains("token=<secret-hidden>"), "{observation}");
    assert!(!frames.lock().unwrap().iter().any(|f| f.contains(SECRET)));
    for (path, bytes) in all_files(server.root()) {
        assert!(!contains(&bytes, SECRET), "{} leaks the secret", path.display());
    }
    assert!(!backend.requests().iter().any(|r| r.to_string().contains(SECRET)));
    let record = server.client().get_json(&format!("/conversations/{}", conversation.id())).unwrap();
    assert!(!record.to_string().contains(SECRET));
}

#[test]
fn records_hold_the_redacted_config() {
    let server = TestServer::start();
    let agent = json!({ "llm": { "model": "m", "api_key": "sk-very-private" }, "tools": ["bash"] });
    let id = create(&server, agent);
    let record = server.client().get_json(&format!("/conversations/{id}")).unwrap();
    assert_eq!(record["agent"]["llm"]["api_key"], "**********");
    for (path, bytes) in all_files(server.root()) {
        assert!(!contains(&bytes, "sk-very-private"), "{}", path.display());
    }
}

struct KeyProbe(Mutex<Vec<Option<String>>>);

impl ChatBackend for KeyProbe {
    fn send(&self, profile: &LlmProfile, _: &ChatRequest) -> Result<LlmResponse, LlmError> {
        self.0.lock().unwrap().push(profile.api_key.as_ref().map(|k| k.expose().to_string()));
        Ok(LlmResponse::text("done"))
    }
}

#[test]
fn credential_aliases_resolve_from_server_config() {
    let server = TestServer::start_with(|c| c.with_credential("team", "sk-team-key"));
    let probe = Arc::new(KeyProbe(Mutex::new(Vec::new())));
    server.llms.register_backend("probe", probe.clone());
    let mut profile = LlmProfile::new("probe");
    profile.credential = Some("team".into());
    let conversation = remote(&server, AgentConfig::new(profile));
    conversation.send_message("hello").unwrap();
    assert_eq!(conversation.run().unwrap(), AgentStatus::Finished);
    assert_eq!(probe.0.lock().unwrap().as_slice(), &[Some("sk-team-key".to_string())]);
}

#[test]
fn workspace_endpoints_follow_the_workspace_contract() {
    let server = TestServer::start_with(|c| c.with_max_body_bytes(4096));
    let workspace = server.workspace();
    workspace.file_upload("dir/a.bin", &[0, 159, 146, 150, 255]).unwrap();
    assert_eq!(workspace.file_download("dir/a.bin").unwrap(), vec![0, 159, 146, 150, 255]);
    assert!(server.root().join("default/dir/a.bin").exists());
    assert!(matches!(workspace.file_download("missing"), Err(WorkspaceError::NotFound(_))));
    assert!(matches!(workspace.file_upload("../escape", b"x"), Err(WorkspaceError::PathEscape(_))));
    let output = workspace.execute_command("cat dir/a.bin | wc -c", None, &BTreeMap::new()).unwrap();
    assert_eq!((output.exit_code, output.stdout.trim()), (0, "5"));
    match workspace.execute_command("echo started; sleep 5", Some(Duration::from_millis(200)), &BTreeMap::new()) {
        Err(WorkspaceError::Timeout { stdout, .. }) => assert!(stdout.contains("started")),
        other => panic!("expected a timeout, got {other:?}"),
    }
    let (status, _) = status_of(server.client().put_bytes("/files", &[("path", "big")], &vec![b'x'; 8192]).unwrap_err());
    assert_eq!(status, 413);
}

#[test]
fn conversation_scoped_files_land_in_its_own_directory() {
    let server = TestServer::start();
    let a = create(&server, json!({ "llm": { "model": "m" } }));
    let b = create(&server, json!({ "llm": { "model": "m" } }));
    let client = server.client();
    client.put_bytes("/files", &[("path", "f.txt"), ("conversation_id", &a)], b"from a").unwrap();
    assert_eq!(client.get_bytes("/files", &[("path", "f.txt"), ("conversation_id", &a)]).unwrap(), b"from a");
    let err = client.get_bytes("/files", &[("path", "f.txt"), ("conversation_id", &b)]).unwrap_err();
    assert_eq!(status_of(err).0, 404);
    let out = client.post_json("/execute", &json!({ "command": "cat f.txt", "conversation_id": a })).unwrap();
    assert_eq!(out["stdout"], "from a");
    let record_a = client.get_json(&format!("/conversations/{a}")).unwrap();
    let record_b = client.get_json(&format!("/conversations/{b}")).unwrap();
    assert_ne!(record_a["working_dir"], record_b["working_dir"]);
}

#[test]
fn frames_are_the_persisted_event_bytes() {
    let server = TestServer::start();
    server.backend("s6", ScriptedBackend::new(vec![bash("c1", "echo one"), bash("c2", "echo two"), text("done")]));
    let conversation = remote(&server, config("s6"));
    conversation.send_message("two commands").unwrap();
    assert_eq!(conversation.run().unwrap(), AgentStatus::Finished);
    let files = event_files(&server.conversation_dir(conversation.id()).join("state"));
    let mut socket = server.connect_ws(conversation.id(), 0);
    let mut frames = Vec::new();
    while frames.len() < files.len() {
        if let WsMessage::Text(t) = socket.read().unwrap() {
            frames.push(t.to_string());
        }
    }
    let expected: Vec<String> =
        files.iter().enumerate().map(|(i, body)| format!("{{\"index\":{i},\"event\":{body}}}")).collect();
    assert_eq!(frames, expected);
}

#[test]
fn concurrent_subscribers_receive_identical_frames() {
    let server = TestServer::start();
    server.backend("s7", ScriptedBackend::new(vec![bash("c1", "echo a"), bash("c2", "echo b"), text("done")]));
    let id = create(&server, serde_json::to_value(config("s7")).unwrap());
    let mut first = server.connect_ws(&id, 0);
    let mut second = server.connect_ws(&id, 0);
    let client = server.client();
    client.post_json(&format!("/conversations/{id}/messages"), &json!({ "content": [{ "type": "text", "text": "go" }] })).unwrap();
    client.send_json("POST", &format!("/conversations/{id}/run"), None).unwrap();
    let a = read_frames_until_end(&mut first);
    let b = read_frames_until_end(&mut second);
    assert!(a.len() > 5);
    assert_eq!(a, b);
}

#[test]
fn a_subscriber_that_stops_reading_never_blocks_the_loop() {
    let server = TestServer::start_with(|c| c.with_stream_queue(2));
    server.backend(
        "s8",
        ScriptedBackend::from_fn(|i, _| {
            Ok(if i < 40 {
                LlmResponse::tool_call(format!("c{i}"), "bash", json!({ "command": format!("echo {}", "x".repeat(2000 + i)) }))
            } else {
                LlmResponse::text("done")
            })
        }),
    );
    let id = create(&server, serde_json::to_value(config("s8").with_max_iterations(100)).unwrap());
    let mut idle = server.connect_ws(&id, 0);
    let client = server.client();
    client.post_json(&format!("/conversations/{id}/messages"), &json!({ "content": [{ "type": "text", "text": "go" }] })).unwrap();
    client.send_json("POST", &format!("/conversations/{id}/run"), None).unwrap();
    assert!(wait_until(Duration::from_secs(20), || {
        client.get_json(&format!("/conversations/{id}")).unwrap()["agent_status"] == "finished"
    }));
    let total = client.get_json(&format!("/conversations/{id}/events")).unwrap().as_array().unwrap().len();
    let mut indexes = Vec::new();
    loop {
        match idle.read() {
            Ok(WsMessage::Text(t)) => {
                let v: Value = serde_json::from_str(t.as_str()).unwrap();
                indexes.push(v["index"].as_u64().unwrap() as usize);
                if indexes.len() == total {
                    break;
                }
            }
            Ok(WsMessage::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    assert_eq!(indexes, (0..indexes.len()).collect::<Vec<_>>());
    let mut resumed = server.connect_ws(&id, indexes.len());
    while indexes.len() < total {
        if let WsMessage::Text(t) = resumed.read().unwrap() {
            let v: Value = serde_json::from_str(t.as_str()).unwrap();
            indexes.push(v["index"].as_u64().unwrap() as usize);
        }
    }
    assert_eq!(indexes, (0..total).collect::<Vec<_>>());
}

#[test]
fn conversations_survive_a_server_restart() {
    let server = TestServer::start();
    server.backend("s9", ScriptedBackend::new(vec![text("first")]));
    let conversation = remote(&server, config("s9"));
    let id = conversation.id().to_string();
    conversation.send_message("one").unwrap();
    assert_eq!(conversation.run().unwrap(), AgentStatus::Finished);
    let before = conversation.events().unwrap();
    drop(conversation);
    let dir = server.stop();
    let llms = agentrt::LlmRegistry::new();
    llms.register_backend("s9", Arc::new(ScriptedBackend::new(vec![text("second")])));
    let server = TestServer::start_with_llms(dir, llms, |c| c);
    let attached = RemoteConversation::attach(&id, server.workspace()).unwrap().with_run_timeout(Duration::from_secs(30));
    assert_eq!(attached.events().unwrap(), before);
    assert_eq!(attached.status().unwrap(), AgentStatus::Finished);
    attached.send_message("two").unwrap();
    assert_eq!(attached.run().unwrap(), AgentStatus::Finished);
    assert!(attached.events().unwrap().len() > before.len());
}

#[test]
fn delete_removes_the_conversation_and_its_files() {
    let server = TestServer::start();
    server.backend("s10", ScriptedBackend::new(vec![text("bye")]));
    let conversation = remote(&server, config("s10"));
    conversation.send_message("hi").unwrap();
    conversation.run().unwrap();
    let dir = server.conversation_dir(conversation.id());
    assert!(dir.exists());
    conversation.close().unwrap();
    assert!(!dir.exists());
    let err = server.client().get_json(&format!("/conversations/{}", conversation.id())).unwrap_err();
    assert_eq!(status_of(err).0, 404);
    assert!(matches!(conversation.status(), Err(ConversationError::NotFound(_))));
}

#[test]
fn malformed_bodies_are_400() {
    let server = TestServer::start();
    let id = create(&server, json!({ "llm": { "model": "m" } }));
    let client = server.client();
    for (path, body) in [
        (format!("/conversations/{id}/messages"), json!({ "content": "not a list" })),
        (format!("/conversations/{id}/messages"), json!({ "content": [] })),
        (format!("/conversations/{id}/confirmation"), json!({ "decision": "maybe" })),
        ("/conversations".to_string(), json!({ "agent": { "llm": { "model": "m" }, "max_iterations": 0 } })),
        ("/conversations".to_string(), json!({ "agent": { "lm": {} } })),
    ] {
        let (status, _) = status_of(client.post_json(&path, &body).unwrap_err());
        assert_eq!(status, 400, "{path} {body}");
    }
}

#[test]
fn policy_can_change_over_the_api() {
    let server = TestServer::start();
    let id = create(&server, json!({ "llm": { "model": "m" } }));
    let policy = serde_json::to_value(ConfirmationPolicy::AlwaysConfirm).unwrap();
    let record = server
        .client()
        .send_json("PUT", &format!("/conversations/{id}/confirmation_policy"), Some(&policy))
        .unwrap();
    assert_eq!(record["confirmation_policy"], policy);
}
