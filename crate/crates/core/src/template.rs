//! Prompt templates with `{{slot}}` placeholders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const AGENT_SYSTEM: &str = include_str!("../templates/agent_system.md");
pub const SUCCESS_ANALYST: &str = include_str!("../templates/success_analyst.md");
pub const ERROR_ANALYST: &str = include_str!("../templates/error_analyst.md");
pub const MERGE: &str = include_str!("../templates/merge.md");
pub const DRAFT_SKILL: &str = include_str!("../templates/draft_skill.md");
pub const DRAFT_REPAIR: &str = include_str!("../templates/draft_repair.md");

/// Whether `template` contains `{{slot}}`.
pub fn has_slot(template: &str, slot: &str) -> bool {
    template.contains(&format!("{{{{{slot}}}}}"))
}

/// Replaces every `{{name}}` found in `values` in a single left-to-right
/// pass, so substituted text is never scanned for further slots. Unknown
/// slots are left untouched.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let values: BTreeMap<&str, &str> = values.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if values.contains_key(after[..close].trim()) => {
                out.push_str(values[after[..close].trim()]);
                rest = &after[close + 2..];
            }
            _ => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Reads an override template when a path is given, otherwise returns the
/// bundled default.
pub fn load_or(path: Option<&Path>, default: &str) -> std::io::Result<String> {
    match path {
        Some(p) => fs::read_to_string(p),
        None => Ok(default.to_string()),
    }
}
