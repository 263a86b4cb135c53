use serde::Deserialize;

use super::{extract_json, render_skill_for_prompt, render_trajectory, AnalystConfig, AnalystError, AnalystKind, AnalystRun, AnalystVerdict, Case, ExclusionReason, MemoryItem, PatchBody, VerdictKind};
use crate::gateway::{ChatMessage, ChatRequest, Gateway};
use crate::patch::{PatchSource, Provenance, SkillPatch};
use crate::skill::SkillDir;
use crate::template;
use crate::trajectory::Outcome;

#[derive(Deserialize)]
struct SuccessOutput {
    #[serde(default)]
    memory_items: Vec<MemoryItem>,
    #[serde(default)]
    themes: Vec<String>,
    patch: PatchBody,
}

/// Single-pass analysis of a successful trajectory: one thinking-mode call
/// whose JSON reply carries memory items and a patch.
pub fn analyze_success(gateway: &Gateway, skill_frozen: &SkillDir, case: &Case<'_>, cfg: &AnalystConfig) -> Result<AnalystRun, AnalystError> {
    let traj = case.trajectory;
    let id = traj.id();
    if traj.outcome != Some(Outcome::Success) {
        return Err(AnalystError::WrongOutcome { id, expected: "success", found: traj.outcome.map(u8::from) });
    }
    let prompt = template::fill(
        &cfg.success_template,
        &[
            ("skill", &render_skill_for_prompt(skill_frozen)),
            ("trajectory", &render_trajectory(traj, &case.task.query, &case.artifacts, cfg.observation_limit)),
            ("role", &cfg.role),
        ],
    );
    let request = ChatRequest::new(vec![ChatMessage::user(prompt)]);
    let exchange = match gateway.complete(&cfg.success_profile, request) {
        Ok(x) => x,
        Err(e) => {
            log::warn!("success analyst for {id}: {e}");
            return Ok(AnalystRun::excluded(&id, AnalystKind::Success, ExclusionReason::MalformedOutput, 1, format!("model call failed: {e}")));
        }
    };
    let parsed = extract_json(&exchange.response.content)
        .ok_or_else(|| "reply holds no JSON object".to_string())
        .and_then(|v| serde_json::from_value::<SuccessOutput>(v).map_err(|e| format!("reply does not match the output shape: {e}")));
    let output = match parsed {
        Ok(o) => o,
        Err(note) => return Ok(AnalystRun::excluded(&id, AnalystKind::Success, ExclusionReason::MalformedOutput, 1, note)),
    };
    let mut provenance = Provenance::analyst(PatchSource::SuccessAnalyst, &id);
    provenance.cited_themes = output.themes;
    let patch = SkillPatch {
        reasoning: output.patch.reasoning,
        edits: output.patch.edits,
        changelog_entries: output.patch.changelog_entries,
        provenance,
    };
    Ok(AnalystRun {
        trajectory_id: id,
        analyst: AnalystKind::Success,
        verdict: AnalystVerdict {
            kind: VerdictKind::PatchProposed,
            exclusion_reason: None,
            memory_items: output.memory_items.into_iter().map(MemoryItem::into_text).collect(),
        },
        patch: Some(patch),
        turns_used: 1,
        failure_causes: Vec::new(),
        note: None,
    })
}
