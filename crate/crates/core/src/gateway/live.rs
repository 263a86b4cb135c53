use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Backend, ChatMessage, ChatRequest, ChatResponse, GatewayError, ModelMode, ModelProfile, Role, ToolCallRequest, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    /// Exponential backoff before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// OpenAI-compatible chat-completions client.
pub struct LiveBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl LiveBackend {
    pub fn new(api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        LiveBackend { agent, api_key, retry }
    }

    fn url(endpoint: &str) -> String {
        let base = endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    let role = match m.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut out = json!({ "role": role, "content": m.content });
    if !m.tool_calls.is_empty() {
        out["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "type": "function",
                    "function": { "name": c.name, "arguments": c.arguments.to_string() },
                })
            })
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        out["tool_call_id"] = json!(id);
    }
    out
}

/// Request body for `profile` and `request`.
pub(crate) fn wire_body(profile: &ModelProfile, request: &ChatRequest) -> Value {
    let mut body = Map::new();
    body.insert("model".into(), json!(profile.model_name));
    body.insert("messages".into(), request.messages.iter().map(wire_message).collect());
    if !request.tools.is_empty() {
        body.insert(
            "tools".into(),
            request
                .tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": { "name": t.name, "description": t.description, "parameters": t.parameters },
                    })
                })
                .collect(),
        );
    }
    let g = &profile.generation;
    if let Some(t) = g.temperature {
        body.insert("temperature".into(), json!(t));
    }
    if let Some(p) = g.top_p {
        body.insert("top_p".into(), json!(p));
    }
    if let Some(m) = g.max_tokens {
        body.insert("max_tokens".into(), json!(m));
    }
    if let Some(s) = g.seed {
        body.insert("seed".into(), json!(s));
    }
    match &profile.extra_body {
        Some(Value::Object(extra)) => {
            for (k, v) in extra {
                body.insert(k.clone(), v.clone());
            }
        }
        _ => {
            let thinking = profile.mode == ModelMode::Thinking;
            body.insert("chat_template_kwargs".into(), json!({ "enable_thinking": thinking }));
        }
    }
    Value::Object(body)
}

/// First choice of a chat-completions response.
pub(crate) fn parse_wire_response(v: &Value) -> Result<(ChatResponse, Usage), GatewayError> {
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| GatewayError::InvalidResponse("no choices[0].message".into()))?;
    let content = message.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        for (i, c) in calls.iter().enumerate() {
            let name = c
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::InvalidResponse("tool call without name".into()))?;
            let arguments = match c.pointer("/function/arguments") {
                Some(Value::String(s)) => serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.clone())),
                Some(other) => other.clone(),
                None => Value::Object(Map::new()),
            };
            let id = c.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("call_{i}"));
            tool_calls.push(ToolCallRequest { id, name: name.to_string(), arguments });
        }
    }
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok((ChatResponse { content, tool_calls }, usage))
}

impl Backend for LiveBackend {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<(ChatResponse, Usage), GatewayError> {
        let url = Self::url(&profile.endpoint);
        let body = wire_body(profile, request);
        let mut attempt = 0u32;
        loop {
            let mut req = self.agent.post(&url).set("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let last = match req.send_json(&body) {
                Ok(resp) => {
                    let v: Value = resp
                        .into_json()
                        .map_err(|e| GatewayError::InvalidResponse(format!("body is not json: {e}")))?;
                    return parse_wire_response(&v);
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    if status != 429 && status < 500 {
                        return Err(GatewayError::Endpoint { status, body: text });
                    }
                    format!("status {status}: {text}")
                }
                Err(ureq::Error::Transport(t)) => t.to_string(),
            };
            if attempt >= self.retry.max_retries {
                return Err(GatewayError::TransportExhausted { attempts: attempt + 1, last });
            }
            log::warn!("chat completion attempt {} failed ({last}); retrying", attempt + 1);
            std::thread::sleep(self.retry.delay(attempt));
            attempt += 1;
        }
    }
}
