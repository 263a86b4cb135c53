use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::sandbox::{run_shell, Sandbox};
use crate::gateway::ToolSpec;
use crate::react::ToolHost;

/// Handler for one tool: arguments in, observation out (`Err` is still an
/// observation, reported to the model as an error).
pub type Handler = Arc<dyn Fn(&Sandbox, &Value, Duration) -> Result<String, String> + Send + Sync>;

/// Most entries `list_files` reports.
const LIST_LIMIT: usize = 500;

/// Registry of tools available to the task agent.
#[derive(Clone)]
pub struct ToolExecutor {
    tools: BTreeMap<String, (ToolSpec, Handler)>,
    pub timeout: Duration,
}

impl std::fmt::Debug for ToolExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolExecutor").field("tools", &self.tools.keys().collect::<Vec<_>>()).field("timeout", &self.timeout).finish()
    }
}

fn str_arg<'a>(args: &'a Value, key: &str) -> Result<&'a str, String> {
    args.get(key).and_then(Value::as_str).ok_or_else(|| format!("missing string argument `{key}`"))
}

fn object_schema(props: Value, required: &[&str]) -> Value {
    json!({ "type": "object", "properties": props, "required": required })
}

pub fn bash_tool() -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: "bash".into(),
        description: "Run a shell command in the working directory and return its exit code, stdout and stderr.".into(),
        parameters: object_schema(json!({ "command": { "type": "string" } }), &["command"]),
    };
    let handler: Handler = Arc::new(|sb, args, timeout| {
        let command = str_arg(args, "command")?;
        run_shell(sb.root(), command, timeout).map(|o| o.render(timeout)).map_err(|e| format!("could not run command: {e}"))
    });
    (spec, handler)
}

/// Reads a text file, optionally a 1-based line window.
pub fn read_text(sb: &Sandbox, args: &Value) -> Result<String, String> {
    let raw = str_arg(args, "path")?;
    let path = sb.resolve(raw).map_err(|e| e.to_string())?;
    let bytes = fs::read(&path).map_err(|e| format!("cannot read {raw}: {e}"))?;
    let text = String::from_utf8(bytes).map_err(|e| format!("{raw} is binary ({} bytes)", e.as_bytes().len()))?;
    let offset = args.get("offset").and_then(Value::as_u64).unwrap_or(1).max(1) as usize;
    let limit = args.get("limit").and_then(Value::as_u64).map(|l| l as usize);
    if offset == 1 && limit.is_none() {
        return Ok(text);
    }
    let lines: Vec<&str> = text.split_inclusive('\n').skip(offset - 1).take(limit.unwrap_or(usize::MAX)).collect();
    Ok(lines.concat())
}

pub fn read_file_tool() -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: "read_file".into(),
        description: "Read a text file. Optional `offset` (1-based line) and `limit` (line count).".into(),
        parameters: object_schema(
            json!({ "path": { "type": "string" }, "offset": { "type": "integer" }, "limit": { "type": "integer" } }),
            &["path"],
        ),
    };
    (spec, Arc::new(|sb, args, _| read_text(sb, args)))
}

pub fn write_file_tool() -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: "write_file".into(),
        description: "Write `content` to a file, creating parent directories.".into(),
        parameters: object_schema(json!({ "path": { "type": "string" }, "content": { "type": "string" } }), &["path", "content"]),
    };
    let handler: Handler = Arc::new(|sb, args, _| {
        let raw = str_arg(args, "path")?;
        let content = str_arg(args, "content")?;
        let path = sb.resolve(raw).map_err(|e| e.to_string())?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        fs::write(&path, content).map_err(|e| format!("cannot write {raw}: {e}"))?;
        Ok(format!("wrote {} bytes to {}", content.len(), sb.display(&path)))
    });
    (spec, handler)
}

pub fn list_files_tool() -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: "list_files".into(),
        description: "List files under a directory (default: the working directory).".into(),
        parameters: object_schema(json!({ "path": { "type": "string" } }), &[]),
    };
    let handler: Handler = Arc::new(|sb, args, _| {
        let raw = args.get("path").and_then(Value::as_str).unwrap_or(".");
        let dir = sb.resolve(raw).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        for entry in walkdir::WalkDir::new(&dir).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| e.to_string())?;
            if entry.file_type().is_file() {
                out.push(sb.display(entry.path()));
            }
        }
        let total = out.len();
        out.truncate(LIST_LIMIT);
        let mut text = out.join("\n");
        if total > LIST_LIMIT {
            text.push_str(&format!("\n[{} more files]", total - LIST_LIMIT));
        }
        Ok(text)
    });
    (spec, handler)
}

impl ToolExecutor {
    pub fn empty(timeout: Duration) -> Self {
        ToolExecutor { tools: BTreeMap::new(), timeout }
    }

    /// `bash`, `read_file`, `write_file` and `list_files`.
    pub fn standard(timeout: Duration) -> Self {
        let mut ex = Self::empty(timeout);
        for (spec, handler) in [bash_tool(), read_file_tool(), write_file_tool(), list_files_tool()] {
            ex.register(spec, handler);
        }
        ex
    }

    pub fn register(&mut self, spec: ToolSpec, handler: Handler) {
        self.tools.insert(spec.name.clone(), (spec, handler));
    }

    pub fn specs(&self) -> Vec<ToolSpec> {
        self.tools.values().map(|(s, _)| s.clone()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn execute(&self, sandbox: &Sandbox, tool: &str, arguments: &Value) -> String {
        match self.tools.get(tool) {
            None => format!("error: unknown tool `{tool}`; available: {}", self.names().join(", ")),
            Some((_, handler)) => match handler(sandbox, arguments, self.timeout) {
                Ok(text) => text,
                Err(message) => format!("error: {message}"),
            },
        }
    }

    /// Binds the registry to one sandbox for use in an agent loop.
    pub fn host<'a>(&'a self, sandbox: &'a Sandbox) -> SandboxHost<'a> {
        SandboxHost { executor: self, sandbox }
    }
}

pub struct SandboxHost<'a> {
    executor: &'a ToolExecutor,
    sandbox: &'a Sandbox,
}

impl ToolHost for SandboxHost<'_> {
    fn specs(&self) -> Vec<ToolSpec> {
        self.executor.specs()
    }

    fn invoke(&mut self, tool: &str, arguments: &Value) -> String {
        self.executor.execute(self.sandbox, tool, arguments)
    }
}
