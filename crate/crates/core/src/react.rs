//! The reason/act/observe loop shared by the task agent and the error analyst.

use pulldown_cmark::{CodeBlockKind, Event, Parser, Tag, TagEnd};
use serde_json::{json, Value};

use crate::gateway::{strip_reasoning, ChatMessage, ChatRequest, Gateway, GatewayError, ModelProfile, ToolCallRequest, ToolSpec};
use crate::trajectory::{Step, ToolCall};

/// Text that introduces the final answer in a terminal message.
pub const FINAL_MARKER: &str = "FINAL ANSWER:";

/// Pseudo-tool recorded as the action of the terminal step.
pub const FINAL_TOOL: &str = "final_answer";

/// Longest observation echoed back to the model in a single message.
const ECHO_LIMIT: usize = 32 * 1024;

/// Something that can execute the tool calls of a loop.
pub trait ToolHost {
    fn specs(&self) -> Vec<ToolSpec>;
    /// Runs one call and returns the observation. Failures are reported in
    /// the observation text, never as errors.
    fn invoke(&mut self, tool: &str, arguments: &Value) -> String;
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub steps: Vec<Step>,
    /// Content of the terminal message; `None` when the budget ran out or
    /// the endpoint failed.
    pub final_text: Option<String>,
    pub error: Option<GatewayError>,
}

impl LoopOutcome {
    pub fn turns(&self) -> usize {
        self.steps.len()
    }

    pub fn budget_exhausted(&self) -> bool {
        self.final_text.is_none() && self.error.is_none()
    }
}

/// Text following the final-answer marker, or the whole message when the
/// marker is absent.
pub fn extract_final_answer(text: &str) -> String {
    match text.rfind(FINAL_MARKER) {
        Some(i) => text[i + FINAL_MARKER.len()..].trim().to_string(),
        None => text.trim().to_string(),
    }
}

/// Tool calls written as fenced blocks, for servers that do not fill the
/// structured tool-call fields. Recognizes ```` ```tool_call ```` blocks
/// holding `{"name": .., "arguments": {..}}` and, when `bash` is available,
/// ```` ```bash ```` / ```` ```sh ```` blocks.
pub fn fenced_tool_calls(text: &str, known: &[ToolSpec]) -> Vec<(String, Value)> {
    let has_bash = known.iter().any(|t| t.name == "bash");
    let mut out = Vec::new();
    let mut current: Option<(String, String)> = None;
    for event in Parser::new(text) {
        match event {
            Event::Start(Tag::CodeBlock(CodeBlockKind::Fenced(info))) => {
                let lang = info.split_whitespace().next().unwrap_or("").to_string();
                current = Some((lang, String::new()));
            }
            Event::Text(t) => {
                if let Some((_, body)) = current.as_mut() {
                    body.push_str(&t);
                }
            }
            Event::End(TagEnd::CodeBlock) => {
                if let Some((lang, body)) = current.take() {
                    match lang.as_str() {
                        "tool_call" | "tool" => {
                            if let Ok(v) = serde_json::from_str::<Value>(&body) {
                                if let Some(name) = v.get("name").and_then(Value::as_str) {
                                    let args = v.get("arguments").cloned().unwrap_or_else(|| json!({}));
                                    out.push((name.to_string(), args));
                                }
                            }
                        }
                        "bash" | "sh" | "shell" if has_bash => {
                            out.push(("bash".to_string(), json!({ "command": body.trim_end() })));
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn echo(observation: &str) -> String {
    if observation.len() <= ECHO_LIMIT {
        return observation.to_string();
    }
    let mut cut = ECHO_LIMIT;
    while !observation.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}\n[... {} more bytes truncated]", &observation[..cut], observation.len() - cut)
}

/// Drives `host` with the model until it stops calling tools or `budget`
/// steps have been taken. Every tool call and the terminal message each
/// count as one step.
pub fn run_loop(
    gateway: &Gateway,
    profile: &ModelProfile,
    mut messages: Vec<ChatMessage>,
    host: &mut dyn ToolHost,
    budget: usize,
) -> LoopOutcome {
    let specs = host.specs();
    let mut steps: Vec<Step> = Vec::new();
    while steps.len() < budget {
        let request = ChatRequest::new(messages.clone()).with_tools(specs.clone());
        let exchange = match gateway.complete(profile, request) {
            Ok(x) => x,
            Err(e) => return LoopOutcome { steps, final_text: None, error: Some(e) },
        };
        let response = exchange.response;
        let reasoning = strip_reasoning(&response.content).trim().to_string();

        if !response.tool_calls.is_empty() {
            messages.push(ChatMessage::assistant(response.content.clone(), response.tool_calls.clone()));
            for (k, call) in response.tool_calls.iter().enumerate() {
                if steps.len() >= budget {
                    break;
                }
                let observation = host.invoke(&call.name, &call.arguments);
                messages.push(ChatMessage::tool(call.id.clone(), echo(&observation)));
                steps.push(Step {
                    reasoning: if k == 0 { reasoning.clone() } else { String::new() },
                    action: ToolCall { tool: call.name.clone(), arguments: call.arguments.clone() },
                    observation,
                    observation_ref: None,
                });
            }
            continue;
        }

        let fenced = fenced_tool_calls(&reasoning, &specs);
        if !fenced.is_empty() && !reasoning.contains(FINAL_MARKER) {
            messages.push(ChatMessage::assistant(response.content.clone(), Vec::<ToolCallRequest>::new()));
            let mut echoed = Vec::new();
            for (k, (tool, arguments)) in fenced.into_iter().enumerate() {
                if steps.len() >= budget {
                    break;
                }
                let observation = host.invoke(&tool, &arguments);
                echoed.push(format!("Observation ({tool}):\n{}", echo(&observation)));
                steps.push(Step {
                    reasoning: if k == 0 { reasoning.clone() } else { String::new() },
                    action: ToolCall { tool, arguments },
                    observation,
                    observation_ref: None,
                });
            }
            messages.push(ChatMessage::user(echoed.join("\n\n")));
            continue;
        }

        steps.push(Step {
            reasoning: reasoning.clone(),
            action: ToolCall { tool: FINAL_TOOL.to_string(), arguments: json!({ "answer": extract_final_answer(&reasoning) }) },
            observation: String::new(),
            observation_ref: None,
        });
        return LoopOutcome { steps, final_text: Some(reasoning), error: None };
    }
    LoopOutcome { steps, final_text: None, error: None }
}
