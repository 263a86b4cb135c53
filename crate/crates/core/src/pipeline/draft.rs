use std::collections::BTreeMap;

use super::PipelineError;
use crate::gateway::{strip_reasoning, ChatMessage, ChatRequest, Gateway, ModelProfile};
use crate::paths::RelPath;
use crate::skill::{validate_skill, SkillDir, ROOT_DOC};
use crate::template;

#[derive(Debug, Clone)]
pub struct DraftPrompts {
    pub draft: String,
    pub repair: String,
}

impl Default for DraftPrompts {
    fn default() -> Self {
        DraftPrompts { draft: template::DRAFT_SKILL.to_string(), repair: template::DRAFT_REPAIR.to_string() }
    }
}

/// The SKILL.md text in a reply: the first markdown fence if there is one,
/// otherwise the whole reply.
fn skill_text(reply: &str) -> String {
    let reply = strip_reasoning(reply);
    for fence in ["```markdown\n", "```md\n"] {
        if let Some(start) = reply.find(fence) {
            let body = &reply[start + fence.len()..];
            let end = body.rfind("\n```").unwrap_or(body.len());
            return format!("{}\n", body[..end].trim_end());
        }
    }
    format!("{}\n", reply.trim())
}

/// Problems with a drafted SKILL.md, one per line; empty when it is usable.
fn check(text: &str) -> (Option<SkillDir>, Vec<String>) {
    let mut files = BTreeMap::new();
    files.insert(RelPath::new(ROOT_DOC).expect("valid"), text.as_bytes().to_vec());
    match SkillDir::from_files(files) {
        Ok(skill) => {
            let report = validate_skill(&skill);
            let problems: Vec<String> = report.errors().map(|f| format!("- {}: {}", f.path, f.message)).collect();
            (Some(skill), problems)
        }
        Err(e) => (None, vec![format!("- {ROOT_DOC}: {e}")]),
    }
}

/// Drafts an initial skill from the model's own knowledge of a domain.
/// One repair round is allowed; a second invalid draft is an error.
/// Returns the skill and the number of model calls made.
pub fn draft_parametric_skill(
    gateway: &Gateway,
    domain_brief: &str,
    profile: &ModelProfile,
    prompts: &DraftPrompts,
) -> Result<(SkillDir, usize), PipelineError> {
    let mut messages = vec![ChatMessage::user(template::fill(&prompts.draft, &[("brief", domain_brief.trim())]))];
    let mut problems = Vec::new();
    for attempt in 1..=2 {
        let reply = gateway.complete(profile, ChatRequest::new(messages.clone()))?.response.content;
        let text = skill_text(&reply);
        let (skill, found) = check(&text);
        if found.is_empty() {
            return Ok((skill.expect("valid skill parsed"), attempt));
        }
        log::warn!("draft attempt {attempt} is invalid: {}", found.join("; "));
        messages.push(ChatMessage::assistant(reply, vec![]));
        messages.push(ChatMessage::user(template::fill(&prompts.repair, &[("findings", &found.join("\n"))])));
        problems = found;
    }
    Err(PipelineError::DraftInvalid(problems))
}
