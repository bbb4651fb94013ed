//! Blocking transport for OpenAI-compatible chat-completion endpoints.

use super::llm::{ChatMessage, ChatRequest, ChatTransport, LlmClientConfig};
use crate::error::{Error, Result};
use serde::Deserialize;

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &LlmClientConfig) -> Result<Self> {
        if config.timeout.is_zero() {
            return Err(Error::Config("llm timeout must be > 0".into()));
        }
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Ok(Self { agent, endpoint: config.endpoint.clone(), api_key: config.api_key.clone() })
    }
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut call = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request)?;
        let response = match call.send_string(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => {
                return Err(Error::LlmTransport(format!("endpoint answered HTTP {code}")))
            }
            Err(e) => return Err(Error::LlmTransport(e.to_string())),
        };
        let text = response
            .into_string()
            .map_err(|e| Error::LlmTransport(format!("reading reply: {e}")))?;
        let reply: CompletionReply = serde_json::from_str(&text)
            .map_err(|e| Error::LlmSchema(format!("not a chat-completion reply: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::LlmSchema("reply has no choices".into()))
    }
}
