//! Chat-completion access for every model call in the pipeline.
//!
//! Two backends sit behind [`Gateway`]: [`LiveBackend`] speaks the
//! OpenAI-compatible chat-completions protocol over HTTP, [`ReplayBackend`]
//! answers from a fixture directory keyed by a canonical request hash. Any
//! backend can be wrapped with a recorder that writes fixtures as it goes.

mod live;
mod replay;

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use live::{LiveBackend, RetryPolicy};
pub use replay::{canonical_json, fixture_key, FixtureStore, ReplayBackend};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request has no messages")]
    EmptyRequest,
    #[error("no replay fixture for key {0}")]
    FixtureMiss(String),
    #[error("transport failed after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("unusable response: {0}")]
    InvalidResponse(String),
    #[error("fixture io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Instruct,
    Thinking,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_cap() -> usize {
    8
}

/// Serving configuration for one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    #[serde(default)]
    pub endpoint: String,
    #[serde(rename = "model")]
    pub model_name: String,
    pub mode: ModelMode,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default = "default_cap")]
    pub concurrency_cap: usize,
    /// Extra top-level request fields. When unset, the mode is sent as
    /// `chat_template_kwargs.enable_thinking`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_body: Option<Value>,
}

impl ModelProfile {
    pub fn new(model_name: &str, mode: ModelMode) -> Self {
        ModelProfile {
            endpoint: String::new(),
            model_name: model_name.to_string(),
            mode,
            generation: GenerationParams::default(),
            concurrency_cap: default_cap(),
            extra_body: None,
        }
    }

    pub fn with_mode(&self, mode: ModelMode) -> Self {
        ModelProfile { mode, ..self.clone() }
    }

    fn limit_key(&self) -> String {
        format!("{}|{}|{:?}", self.endpoint, self.model_name, self.mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into(), tool_calls: Vec::new(), tool_call_id: None }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>, tool_calls: Vec<ToolCallRequest>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into(), tool_calls, tool_call_id: None }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Tool, content: content.into(), tool_calls: Vec::new(), tool_call_id: Some(call_id.into()) }
    }
}

/// A function the model may call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolSpec>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        ChatRequest { messages, tools: Vec::new() }
    }

    pub fn with_tools(mut self, tools: Vec<ToolSpec>) -> Self {
        self.tools = tools;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRequest>,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        ChatResponse { content: content.into(), tool_calls: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// A completed request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub model: String,
    pub mode: ModelMode,
    pub request: ChatRequest,
    pub response: ChatResponse,
    #[serde(default)]
    pub usage: Usage,
}

pub trait Backend: Send + Sync {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<(ChatResponse, Usage), GatewayError>;
}

/// Backend driven by a closure. Used to script model behaviour in tests
/// and when authoring fixture corpora.
pub struct ScriptedBackend<F>(pub F);

impl<F> Backend for ScriptedBackend<F>
where
    F: Fn(&ModelProfile, &ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<(ChatResponse, Usage), GatewayError> {
        (self.0)(profile, request).map(|r| (r, Usage::default()))
    }
}

#[derive(Default)]
struct Gate {
    in_flight: usize,
    peak: usize,
}

struct Limiter {
    cap: usize,
    gate: Mutex<Gate>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) {
        let mut g = self.gate.lock().expect("limiter poisoned");
        while g.in_flight >= self.cap {
            g = self.cv.wait(g).expect("limiter poisoned");
        }
        g.in_flight += 1;
        g.peak = g.peak.max(g.in_flight);
    }

    fn release(&self) {
        let mut g = self.gate.lock().expect("limiter poisoned");
        g.in_flight -= 1;
        self.cv.notify_one();
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        self.0.release();
    }
}

/// Shared, thread-safe entry point for model calls.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    recorder: Option<FixtureStore>,
    limiters: Mutex<HashMap<String, Arc<Limiter>>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway { backend, recorder: None, limiters: Mutex::new(HashMap::new()) }
    }

    pub fn replay(store: FixtureStore) -> Self {
        Self::new(Arc::new(ReplayBackend::new(store)))
    }

    /// Records every successful exchange into `store`.
    pub fn recording(mut self, store: FixtureStore) -> Self {
        self.recorder = Some(store);
        self
    }

    fn limiter(&self, profile: &ModelProfile) -> Arc<Limiter> {
        let mut map = self.limiters.lock().expect("limiter map poisoned");
        map.entry(profile.limit_key())
            .or_insert_with(|| {
                Arc::new(Limiter { cap: profile.concurrency_cap.max(1), gate: Mutex::default(), cv: Condvar::new() })
            })
            .clone()
    }

    /// Highest number of simultaneous in-flight calls seen for `profile`.
    pub fn peak_in_flight(&self, profile: &ModelProfile) -> usize {
        self.limiter(profile).gate.lock().expect("limiter poisoned").peak
    }

    pub fn complete(&self, profile: &ModelProfile, request: ChatRequest) -> Result<ChatExchange, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        let limiter = self.limiter(profile);
        limiter.acquire();
        let result = {
            let _permit = Permit(&limiter);
            self.backend.send(profile, &request)
        };
        let (response, usage) = result?;
        let exchange = ChatExchange {
            model: profile.model_name.clone(),
            mode: profile.mode,
            request,
            response,
            usage,
        };
        if let Some(store) = &self.recorder {
            store.record(&exchange)?;
        }
        Ok(exchange)
    }
}

/// Strips a leading `<think>...</think>` block some thinking-mode servers
/// leave in the content.
pub fn strip_reasoning(content: &str) -> &str {
    let t = content.trim_start();
    if let Some(rest) = t.strip_prefix("<think>") {
        if let Some(end) = rest.find("</think>") {
            return rest[end + "</think>".len()..].trim_start();
        }
    }
    content
}
