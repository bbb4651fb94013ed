//! LLM backend: an OpenAI-compatible chat-completion client plus a replay
//! transport that answers from recorded transcripts.

use super::embed::fnv1a64;
use super::grammar::{canonical_predicate, SELF_SOURCE};
use super::{ParsedInstruction, RelationText};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

pub const PROMPT_VERSION: &str = "parse-v1";

/// System prompt: task description with the three reasoning steps followed
/// by three demonstrations. Changing the text changes every request hash,
/// so recorded transcripts must be regenerated alongside it.
pub const PROMPT_TEMPLATE: &str = r#"You convert a robot instruction into a structured command.
Work in three steps:
1. Identify the action the robot must perform.
2. Identify the source object the action applies to. If the robot itself moves, the source is "self".
3. Identify every target constraint in the order it appears. Each target is a pair of a referenced object and a spatial predicate chosen from: left, right, above, below, left above, right above, left below, right below, close, far, front, behind.
Reply with a single JSON object and nothing else, using exactly the keys "action", "source" and "target", where "target" is a list of [object, predicate] pairs.

Input: put the cyan bowl above the chocolate and left of the silver spoon.
Output: {"action": "put", "source": "cyan bowl", "target": [["chocolate", "above"], ["silver spoon", "left"]]}

Input: put the green ring to the left of the gray cube, the above of the gray cube, and the right of the red bowl.
Output: {"action": "put", "source": "green ring", "target": [["gray cube", "left"], ["gray cube", "above"], ["red bowl", "right"]]}

Input: move to the front of the red box and close to the tree.
Output: {"action": "move", "source": "self", "target": [["red box", "front"], ["tree", "close"]]}
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub prompt: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
}

impl LlmClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(30),
            prompt: PROMPT_TEMPLATE.to_string(),
            api_key: None,
        }
    }

    /// Reads `LLM_ENDPOINT` and `LLM_API_KEY`; `None` when no endpoint is set.
    pub fn from_env(model: &str) -> Option<Self> {
        let endpoint = std::env::var("LLM_ENDPOINT").ok().filter(|e| !e.is_empty())?;
        let mut cfg = Self::new(endpoint, model);
        cfg.api_key = std::env::var("LLM_API_KEY").ok().filter(|k| !k.is_empty());
        Some(cfg)
    }

    pub fn request_for(&self, instruction: &str) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            temperature: 0.0,
            messages: vec![
                ChatMessage { role: "system".into(), content: self.prompt.clone() },
                ChatMessage { role: "user".into(), content: instruction.trim().to_string() },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// Hex FNV-1a hash of the serialized request; the replay lookup key.
pub fn request_hash(request: &ChatRequest) -> String {
    let body = serde_json::to_string(request).expect("request serializes");
    format!("{:016x}", fnv1a64(body.as_bytes()))
}

/// Sends a chat request and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub request_hash: String,
    pub reply: String,
}

/// Offline transport answering from `{request_hash, reply}` records.
#[derive(Debug, Default, Clone)]
pub struct ReplayTransport {
    records: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        Self { records: records.into_iter().map(|r| (r.request_hash, r.reply)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<ReplayRecord> = serde_json::from_str(&text)?;
        Ok(Self::new(records))
    }

    pub fn insert(&mut self, request: &ChatRequest, reply: impl Into<String>) {
        self.records.insert(request_hash(request), reply.into());
    }

    /// Records sorted by hash, ready to be written as a transcript file.
    pub fn records(&self) -> Vec<ReplayRecord> {
        let mut out: Vec<_> = self
            .records
            .iter()
            .map(|(h, r)| ReplayRecord { request_hash: h.clone(), reply: r.clone() })
            .collect();
        out.sort_by(|a, b| a.request_hash.cmp(&b.request_hash));
        out
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let key = request_hash(request);
        self.records
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::LlmTransport(format!("no recorded reply for request {key}")))
    }
}

pub struct LlmClient {
    pub config: LlmClientConfig,
    transport: Box<dyn ChatTransport>,
}

impl LlmClient {
    pub fn new(config: LlmClientConfig, transport: Box<dyn ChatTransport>) -> Self {
        Self { config, transport }
    }

    #[cfg(feature = "http")]
    pub fn http(config: LlmClientConfig) -> Result<Self> {
        let transport = super::http::HttpTransport::new(&config)?;
        Ok(Self::new(config, Box::new(transport)))
    }

    pub fn replay(config: LlmClientConfig, transport: ReplayTransport) -> Self {
        Self::new(config, Box::new(transport))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplySchema {
    action: String,
    source: String,
    target: Vec<(String, String)>,
}

/// The reply in the expected schema that encodes `parsed`. Used to write
/// replay transcripts.
pub fn reply_for(parsed: &ParsedInstruction) -> String {
    let target: Vec<[&str; 2]> = parsed.targets.iter().map(|t| [t.referent.as_str(), t.predicate.as_str()]).collect();
    serde_json::json!({ "action": parsed.action, "source": parsed.source, "target": target }).to_string()
}

pub fn parse_llm(instruction: &str, client: &LlmClient) -> Result<ParsedInstruction> {
    let request = client.config.request_for(instruction);
    let reply = client.transport.complete(&request)?;
    parse_reply(&reply)
}

fn parse_reply(reply: &str) -> Result<ParsedInstruction> {
    let mut body = reply.trim();
    if let Some(rest) = body.strip_prefix("```") {
        body = rest.trim_start_matches("json").trim();
        body = body.strip_suffix("```").unwrap_or(body).trim();
    }
    if !(body.starts_with('{') && body.ends_with('}')) {
        return Err(Error::LlmSchema(format!("reply is not a single JSON object: {reply:?}")));
    }
    let parsed: ReplySchema =
        serde_json::from_str(body).map_err(|e| Error::LlmSchema(e.to_string()))?;
    let action = parsed.action.trim().to_lowercase();
    if action.is_empty() {
        return Err(Error::LlmSchema("empty action".into()));
    }
    let source = match parsed.source.trim().to_lowercase() {
        s if s.is_empty() || s == "none" => SELF_SOURCE.to_string(),
        s => s,
    };
    if parsed.target.is_empty() {
        return Err(Error::LlmSchema("target list is empty".into()));
    }
    let mut targets = Vec::with_capacity(parsed.target.len());
    for (referent, predicate) in parsed.target {
        let referent = referent.trim().to_lowercase();
        if referent.is_empty() {
            return Err(Error::LlmSchema("empty referenced object".into()));
        }
        let predicate = canonical_predicate(&predicate)
            .ok_or_else(|| Error::LlmSchema(format!("unknown predicate {predicate:?}")))?;
        targets.push(RelationText::new(referent, predicate));
    }
    Ok(ParsedInstruction { action, source, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_grammar;

    const CYAN: &str = "put the cyan bowl above the chocolate and left of the silver spoon";

    fn replay_with(reply: &str) -> LlmClient {
        let config = LlmClientConfig::new("http://replay.invalid", "stub");
        let mut t = ReplayTransport::default();
        t.insert(&config.request_for(CYAN), reply);
        LlmClient::replay(config, t)
    }

    #[test]
    fn replayed_reply_agrees_with_grammar() {
        let reply = r#"{"action": "put", "source": "cyan bowl", "target": [["chocolate", "above"], ["silver spoon", "left"]]}"#;
        let got = parse_llm(CYAN, &replay_with(reply)).unwrap();
        assert_eq!(got, parse_grammar(CYAN).unwrap());
        assert_eq!(parse_llm(CYAN, &replay_with(&reply_for(&got))).unwrap(), got);
        let fenced = format!("```json\n{reply}\n```");
        assert_eq!(parse_llm(CYAN, &replay_with(&fenced)).unwrap(), got);
    }

    #[test]
    fn malformed_replies_are_schema_errors() {
        for bad in [
            "sure! here you go",
            r#"{"action": "put"}"#,
            r#"{"action": "put", "source": "x", "target": []}"#,
            r#"{"action": "put", "source": "x", "target": [["a", "inside"]]}"#,
            r#"{"action": "put", "source": "x", "target": [["a", "left"]], "extra": 1}"#,
        ] {
            assert!(matches!(parse_llm(CYAN, &replay_with(bad)), Err(Error::LlmSchema(_))), "{bad}");
        }
    }

    #[test]
    fn missing_record_is_a_transport_error() {
        let client = replay_with("{}");
        assert!(matches!(parse_llm("go left of the tree", &client), Err(Error::LlmTransport(_))));
    }

    #[test]
    fn request_hash_is_stable() {
        let c = LlmClientConfig::new("x", "m");
        assert_eq!(request_hash(&c.request_for(CYAN)), request_hash(&c.request_for(&format!(" {CYAN} "))));
        assert_ne!(request_hash(&c.request_for(CYAN)), request_hash(&c.request_for("go left of the tree")));
    }
}
