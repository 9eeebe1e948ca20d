use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Completion, LanguageModel, LlmError, LlmProfile, Message, ProfileLlm, ToolSchema};

/// Chooses which routed model serves a request.
pub trait RouteSelector: Send + Sync {
    /// Returns the key of the model to use.
    fn select_llm(&self, messages: &[Message]) -> String;
}

/// Sends requests containing any image to `primary`, everything else to
/// `secondary`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MultimodalRouter;

impl RouteSelector for MultimodalRouter {
    fn select_llm(&self, messages: &[Message]) -> String {
        let has_images = messages.iter().any(Message::contains_image);
        if has_images { "primary" } else { "secondary" }.to_string()
    }
}

/// Built-in selectors addressable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Multimodal,
}

impl RouterKind {
    pub fn selector(self) -> Box<dyn RouteSelector> {
        match self {
            RouterKind::Multimodal => Box::new(MultimodalRouter),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSpec {
    pub router: RouterKind,
    pub llms_for_routing: BTreeMap<String, LlmProfile>,
}

/// Key the configured router would pick for `messages`.
pub fn select_llm(spec: &RouterSpec, messages: &[Message]) -> Result<String, LlmError> {
    let key = spec.router.selector().select_llm(messages);
    if spec.llms_for_routing.contains_key(&key) {
        Ok(key)
    } else {
        Err(LlmError::UnknownRouteKey(key))
    }
}

/// A router is itself a [`LanguageModel`]: it picks a key and delegates.
pub struct RouterLlm {
    selector: Box<dyn RouteSelector>,
    routes: BTreeMap<String, ProfileLlm>,
}

impl RouterLlm {
    pub fn new(selector: Box<dyn RouteSelector>, routes: BTreeMap<String, ProfileLlm>) -> Self {
        assert!(!routes.is_empty(), "router needs at least one profile");
        RouterLlm { selector, routes }
    }

    pub fn route(&self, messages: &[Message]) -> Result<&ProfileLlm, LlmError> {
        let key = self.selector.select_llm(messages);
        self.routes.get(&key).ok_or(LlmError::UnknownRouteKey(key))
    }
}

impl LanguageModel for RouterLlm {
    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<Completion, LlmError> {
        self.route(messages)?.complete(messages, tools)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::ContentPart;
    use crate::llm::{LlmResponse, ScriptedBackend};
    use std::sync::Arc;

    fn image_message() -> Message {
        Message { content: vec![ContentPart::Image { url: "https://x/y.png".into() }], ..Message::user("") }
    }

    #[test]
    fn multimodal_selection() {
        let r = MultimodalRouter;
        assert_eq!(r.select_llm(&[Message::user("a"), image_message()]), "primary");
        assert_eq!(r.select_llm(&[Message::user("a")]), "secondary");
        assert_eq!(r.select_llm(&[]), "secondary");
    }

    struct Fixed(&'static str);
    impl RouteSelector for Fixed {
        fn select_llm(&self, _: &[Message]) -> String {
            self.0.to_string()
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let backend = Arc::new(ScriptedBackend::new(vec![LlmResponse::text("x")]));
        let routes = BTreeMap::from([("primary".to_string(), ProfileLlm::new(LlmProfile::new("a"), backend))]);
        let router = RouterLlm::new(Box::new(Fixed("elsewhere")), routes);
        assert!(matches!(
            router.complete(&[Message::user("hi")], &[]),
            Err(LlmError::UnknownRouteKey(k)) if k == "elsewhere"
        ));
    }
}
