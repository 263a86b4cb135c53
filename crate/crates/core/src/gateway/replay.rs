use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Backend, ChatExchange, ChatRequest, ChatResponse, GatewayError, ModelMode, ModelProfile, Usage};

/// Serializes `value` with object keys sorted at every depth and no
/// insignificant whitespace.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(k).expect("string serializes"));
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Replay key: sha-256 over the canonical form of `(model, mode, request)`.
pub fn fixture_key(model: &str, mode: ModelMode, request: &ChatRequest) -> String {
    let v = json!({
        "model": model,
        "mode": mode,
        "request": serde_json::to_value(request).expect("request serializes"),
    });
    hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
}

/// Directory of `<key>.json` fixture records.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Persists `exchange` under its key. Re-recording an identical
    /// exchange leaves the file untouched.
    pub fn record(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        let key = fixture_key(&exchange.model, exchange.mode, &exchange.request);
        let mut record = serde_json::to_value(exchange).expect("exchange serializes");
        record["key"] = Value::String(key.clone());
        let mut text = serde_json::to_string_pretty(&record).expect("value serializes");
        text.push('\n');
        let path = self.path_for(&key);
        if fs::read_to_string(&path).ok().as_deref() == Some(text.as_str()) {
            return Ok(key);
        }
        fs::create_dir_all(&self.dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(key)
    }

    pub fn lookup(&self, key: &str) -> Result<ChatExchange, GatewayError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::FixtureMiss(key.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::InvalidResponse(format!("fixture {}: {e}", path.display())))
    }

    pub fn keys(&self) -> std::io::Result<Vec<String>> {
        let mut out = Vec::new();
        if !self.dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(key) = name.strip_suffix(".json") {
                out.push(key.to_string());
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Answers from recorded fixtures only; never touches the network.
pub struct ReplayBackend {
    store: FixtureStore,
}

impl ReplayBackend {
    pub fn new(store: FixtureStore) -> Self {
        ReplayBackend { store }
    }
}

impl Backend for ReplayBackend {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<(ChatResponse, Usage), GatewayError> {
        let key = fixture_key(&profile.model_name, profile.mode, request);
        let exchange = self.store.lookup(&key)?;
        Ok((exchange.response, exchange.usage))
    }
}
