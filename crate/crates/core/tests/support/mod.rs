//! Scripted stand-ins for model behaviour shared by tests and the fixture
//! corpus builder.
#![allow(dead_code)]

use std::collections::BTreeMap;

use serde_json::{json, Value};

pub mod world;

/// Every fenced ```` ```json ```` block in `text`, parsed.
pub fn fenced_json(text: &str) -> Vec<Value> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```json\n") {
        let body = &rest[open + 8..];
        let Some(close) = body.find("\n```") else { break };
        if let Ok(v) = serde_json::from_str(&body[..close]) {
            out.push(v);
        }
        rest = &body[close + 4..];
    }
    out
}

/// A merge operator that keeps every input edit, folding edits aimed at
/// the same place (same file, operation and section) into one. Folded
/// insertions keep each distinct paragraph once; for other operations the
/// first edit wins.
pub fn echo_merge(prompt: &str) -> String {
    let patches_part = prompt.split("# Input patches").nth(1).unwrap_or(prompt);
    let n = patches_part.matches("\n## Patch ").count() + usize::from(patches_part.starts_with("## Patch "));
    let mut themes: Vec<String> = Vec::new();
    for line in patches_part.lines() {
        if let Some(t) = line.strip_prefix("Themes: ") {
            for theme in t.split(", ") {
                if !themes.iter().any(|x| x == theme) {
                    themes.push(theme.to_string());
                }
            }
        }
    }
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut folded: BTreeMap<(String, String, String), (Value, Vec<String>)> = BTreeMap::new();
    for block in fenced_json(patches_part) {
        for edit in block.as_array().cloned().unwrap_or_default() {
            let op = edit["op"].as_str().unwrap_or("").to_string();
            let file = edit["file"].as_str().unwrap_or("").to_string();
            let place = match op.as_str() {
                "insert_after" => edit["target_section"].as_str().unwrap_or("").to_string(),
                "replace_lines" => format!("{}-{}", edit["start"], edit["end"]),
                _ => String::new(),
            };
            let key = (file, op.clone(), place);
            let content = edit["content"].as_str().unwrap_or("").to_string();
            match folded.get_mut(&key) {
                // insertions fold paragraph by paragraph, skipping ones already present
                Some((existing, paragraphs)) if op == "insert_after" || op == "append" => {
                    for para in content.split("\n\n").map(str::trim_end).filter(|p| !p.is_empty()) {
                        if !paragraphs.iter().any(|p| p == para) {
                            paragraphs.push(para.to_string());
                        }
                    }
                    existing["content"] = Value::String(paragraphs.join("\n\n"));
                }
                Some(_) => {}
                None => {
                    let paragraphs = content.split("\n\n").map(str::trim_end).filter(|p| !p.is_empty()).map(str::to_string).collect();
                    order.push(key.clone());
                    folded.insert(key, (edit, paragraphs));
                }
            }
        }
    }
    let edits: Vec<Value> = order.iter().map(|k| folded[k].0.clone()).collect();
    json!({
        "reasoning": format!("Merged {n} patches; edits aimed at the same section were combined."),
        "edits": edits,
        "changelog_entries": [format!("Merged {n} patches")],
        "cited_themes": themes,
    })
    .to_string()
}
