use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::MergeConfig;
use crate::analysts::{extract_json, render_skill_for_prompt};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::patch::{screen, ConflictReport, EditOp, PatchSource, Provenance, SkillPatch};
use crate::skill::SkillDir;
use crate::template;

/// What happened inside one merge group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub level: u32,
    pub group: usize,
    pub inputs: usize,
    /// Model calls made (0 for a pass-through).
    pub calls: usize,
    /// The model output was unusable and the inputs were concatenated.
    pub degraded: bool,
    /// Edits removed by the pre-screen, indexed into the unscreened output.
    pub screened: ConflictReport,
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    pub patch: SkillPatch,
    pub record: MergeRecord,
}

#[derive(Deserialize)]
struct MergeReply {
    #[serde(default)]
    reasoning: String,
    edits: Vec<EditOp>,
    #[serde(default)]
    changelog_entries: Vec<String>,
    #[serde(default)]
    cited_themes: Vec<String>,
}

fn merged_provenance(patches: &[SkillPatch]) -> Provenance {
    let ids: BTreeSet<&str> = patches.iter().flat_map(|p| p.provenance.trajectory_ids.iter().map(String::as_str)).collect();
    Provenance {
        source: PatchSource::Merge,
        trajectory_ids: ids.into_iter().map(str::to_string).collect(),
        merge_level: 1 + patches.iter().map(|p| p.provenance.merge_level).max().unwrap_or(0),
        cited_themes: Vec::new(),
    }
}

fn union_themes(patches: &[SkillPatch]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in patches.iter().flat_map(|p| &p.provenance.cited_themes) {
        if seen.insert(t.as_str()) {
            out.push(t.clone());
        }
    }
    out
}

/// Input patches as shown to the merge operator, each with its evidence
/// count.
pub fn render_patches(patches: &[SkillPatch]) -> String {
    let total: usize = patches.iter().map(|p| p.provenance.trajectory_ids.len()).sum();
    let mut out = format!("{} patches backed by {total} trajectories in total.\n\n", patches.len());
    for (i, p) in patches.iter().enumerate() {
        let source = match p.provenance.source {
            PatchSource::ErrorAnalyst => "failed trajectory",
            PatchSource::SuccessAnalyst => "successful trajectory",
            PatchSource::Merge => "earlier merge",
        };
        out.push_str(&format!(
            "## Patch {}\nFrom: {source}\nEvidence: {} trajectories\n",
            i + 1,
            p.provenance.trajectory_ids.len()
        ));
        if !p.provenance.cited_themes.is_empty() {
            out.push_str(&format!("Themes: {}\n", p.provenance.cited_themes.join(", ")));
        }
        out.push_str(&format!("Reasoning: {}\n", p.reasoning.trim()));
        let edits = serde_json::to_string_pretty(&p.edits).expect("edits serialize");
        out.push_str(&format!("Edits:\n```json\n{edits}\n```\n"));
        if !p.changelog_entries.is_empty() {
            out.push_str("Changelog:\n");
            for c in &p.changelog_entries {
                out.push_str(&format!("- {c}\n"));
            }
        }
        out.push('\n');
    }
    out
}

/// Strips every edit the guardrails would withhold against `skill`.
pub fn prescreen(patch: SkillPatch, skill: &SkillDir) -> (SkillPatch, ConflictReport) {
    let (_, report) = screen(&patch, skill);
    let withheld = report.withheld();
    if withheld.is_empty() {
        return (patch, report);
    }
    (patch.without_edits(&withheld), report)
}

fn parse_reply(text: &str) -> Result<MergeReply, String> {
    let value = extract_json(text).ok_or_else(|| "reply holds no JSON object".to_string())?;
    serde_json::from_value(value).map_err(|e| format!("reply does not match the patch shape: {e}"))
}

/// Merges one group of patches into one.
///
/// A single patch passes through with its level raised. Otherwise the merge
/// operator is asked once, and again with the parse error when the reply
/// is unusable; after that the inputs are concatenated. The result is
/// screened against `skill_frozen` and withheld edits are dropped.
pub fn merge_batch(gateway: &Gateway, skill_frozen: &SkillDir, patches: &[SkillPatch], cfg: &MergeConfig, level: u32, group: usize) -> MergeOutput {
    assert!(!patches.is_empty(), "merge group is empty");
    let mut provenance = merged_provenance(patches);
    if patches.len() == 1 {
        let mut patch = patches[0].clone();
        provenance.cited_themes = patch.provenance.cited_themes.clone();
        patch.provenance = provenance;
        let record = MergeRecord { level, group, inputs: 1, calls: 0, degraded: false, screened: ConflictReport::default() };
        return MergeOutput { patch, record };
    }

    let prompt = template::fill(
        &cfg.template,
        &[("skill", &render_skill_for_prompt(skill_frozen)), ("patches", &render_patches(patches))],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut calls = 0;
    let mut reply = None;
    for attempt in 0..2 {
        calls += 1;
        match gateway.complete(&cfg.profile, ChatRequest::new(messages.clone())) {
            Ok(x) => match parse_reply(&x.response.content) {
                Ok(r) => {
                    reply = Some(r);
                    break;
                }
                Err(problem) => {
                    log::warn!("merge level {level} group {group}: {problem}");
                    if attempt == 0 {
                        messages.push(ChatMessage::assistant(x.response.content, vec![]));
                        messages.push(ChatMessage::user(format!(
                            "That reply could not be used: {problem}. Reply with only the JSON object."
                        )));
                    }
                }
            },
            Err(e) => log::warn!("merge level {level} group {group}: {e}"),
        }
    }

    let degraded = reply.is_none();
    let patch = match reply {
        Some(r) => {
            provenance.cited_themes = if r.cited_themes.is_empty() { union_themes(patches) } else { r.cited_themes };
            SkillPatch { reasoning: r.reasoning, edits: r.edits, changelog_entries: r.changelog_entries, provenance }
        }
        None => {
            log::warn!("merge level {level} group {group}: falling back to concatenating {} patches", patches.len());
            provenance.cited_themes = union_themes(patches);
            SkillPatch {
                reasoning: format!("Concatenated {} patches; the merge reply was unusable.", patches.len()),
                edits: patches.iter().flat_map(|p| p.edits.iter().cloned()).collect(),
                changelog_entries: patches.iter().flat_map(|p| p.changelog_entries.iter().cloned()).collect(),
                provenance,
            }
        }
    };
    let (patch, screened) = prescreen(patch, skill_frozen);
    MergeOutput { patch, record: MergeRecord { level, group, inputs: patches.len(), calls, degraded, screened } }
}
