use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use agentrt::ConversationError;

/// An error reply: `{"error": code, "message": text}` with an HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiFailure {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiFailure {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiFailure { status, code, message: message.into() }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid API key")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<ConversationError> for ApiFailure {
    fn from(e: ConversationError) -> Self {
        let message = e.to_string();
        match e {
            ConversationError::AlreadyRunning => Self::new(StatusCode::CONFLICT, "already_running", message),
            ConversationError::NoPendingAction => Self::new(StatusCode::CONFLICT, "no_pending_action", message),
            ConversationError::InvalidConfig(_) => Self::bad_request("invalid_config", message),
            ConversationError::InvalidInput(_) => Self::bad_request("invalid_input", message),
            ConversationError::NotFound(_) => Self::not_found(message),
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}
