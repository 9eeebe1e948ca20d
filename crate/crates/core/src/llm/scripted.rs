use std::collections::VecDeque;
use std::sync::Mutex;

use serde_json::Value;

use super::{serialize_request, ChatBackend, ChatRequest, LlmError, LlmProfile, LlmResponse};

/// One canned outcome of a scripted call.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedReply {
    Response(LlmResponse),
    Error(LlmError),
}

impl From<LlmResponse> for ScriptedReply {
    fn from(r: LlmResponse) -> Self {
        ScriptedReply::Response(r)
    }
}

type Responder = Box<dyn Fn(usize, &ChatRequest) -> Result<LlmResponse, LlmError> + Send + Sync>;
type RequestHook = Box<dyn Fn(usize, &ChatRequest) + Send + Sync>;

/// Deterministic provider replaying a transcript.
///
/// Replies are consumed in order; every request is recorded as the exact
/// chat-completions body the HTTP client would have sent, so tests can
/// inspect what reached "the model".
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<ScriptedReply>>,
    responder: Option<Responder>,
    hook: Option<RequestHook>,
    requests: Mutex<Vec<Value>>,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = impl Into<ScriptedReply>>) -> Self {
        ScriptedBackend {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            responder: None,
            hook: None,
            requests: Mutex::new(Vec::new()),
        }
    }

    /// A backend computing each reply from the call index and request.
    pub fn from_fn(
        responder: impl Fn(usize, &ChatRequest) -> Result<LlmResponse, LlmError> + Send + Sync + 'static,
    ) -> Self {
        ScriptedBackend {
            replies: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(responder)),
            hook: None,
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Installs an assertion hook run on every request before replying.
    pub fn with_hook(mut self, hook: impl Fn(usize, &ChatRequest) + Send + Sync + 'static) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    /// Wire bodies of all requests received so far.
    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap_or_else(|p| p.into_inner()).len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, profile: &LlmProfile, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let index = {
            let mut requests = self.requests.lock().unwrap_or_else(|p| p.into_inner());
            requests.push(serialize_request(profile, request));
            requests.len() - 1
        };
        if let Some(hook) = &self.hook {
            hook(index, request);
        }
        if let Some(responder) = &self.responder {
            return responder(index, request);
        }
        match self.replies.lock().unwrap_or_else(|p| p.into_inner()).pop_front() {
            Some(ScriptedReply::Response(r)) => Ok(r),
            Some(ScriptedReply::Error(e)) => Err(e),
            None => Err(LlmError::ScriptExhausted(index)),
        }
    }
}
