//! Stage 2: per-trajectory analysts proposing skill patches.

mod error;
mod render;
mod success;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use error::analyze_error;
pub use render::{render_skill_for_prompt, render_trajectory};
pub use success::analyze_success;

use crate::gateway::{strip_reasoning, Gateway, ModelProfile};
use crate::patch::{EditOp, SkillPatch};
use crate::rollout::Evaluators;
use crate::skill::SkillDir;
use crate::template;
use crate::trajectory::{TaskSpec, Trajectory};

#[derive(Debug, Error)]
pub enum AnalystError {
    #[error("trajectory {id} has outcome {found:?}, this analyst needs {expected}")]
    WrongOutcome { id: String, expected: &'static str, found: Option<u8> },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalystKind {
    Error,
    Success,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    PatchProposed,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    BudgetExhausted,
    NoVerifiedCause,
    MalformedOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalystVerdict {
    pub kind: VerdictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_reason: Option<ExclusionReason>,
    #[serde(default)]
    pub memory_items: Vec<String>,
}

impl AnalystVerdict {
    pub fn excluded(reason: ExclusionReason) -> Self {
        AnalystVerdict { kind: VerdictKind::Excluded, exclusion_reason: Some(reason), memory_items: Vec::new() }
    }
}

/// Record of one analyst over one trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalystRun {
    pub trajectory_id: String,
    pub analyst: AnalystKind,
    pub verdict: AnalystVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<SkillPatch>,
    pub turns_used: usize,
    /// Causal explanations given by an error analyst.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_causes: Vec<String>,
    /// Why the run was excluded, in words.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AnalystRun {
    fn excluded(trajectory_id: &str, analyst: AnalystKind, reason: ExclusionReason, turns: usize, note: impl Into<String>) -> Self {
        AnalystRun {
            trajectory_id: trajectory_id.to_string(),
            analyst,
            verdict: AnalystVerdict::excluded(reason),
            patch: None,
            turns_used: turns,
            failure_causes: Vec::new(),
            note: Some(note.into()),
        }
    }
}

/// A trajectory together with what an analyst needs to inspect it.
#[derive(Debug, Clone)]
pub struct Case<'a> {
    pub trajectory: &'a Trajectory,
    pub task: &'a TaskSpec,
    /// Directory task inputs and ground-truth paths are relative to.
    pub task_base: &'a Path,
    /// Absolute artifact directory of the trajectory.
    pub artifacts: PathBuf,
}

#[derive(Debug, Clone)]
pub struct AnalystConfig {
    pub success_profile: ModelProfile,
    pub error_profile: ModelProfile,
    /// Turn budget of the error analyst loop.
    pub error_budget: usize,
    pub success_template: String,
    pub error_template: String,
    /// Fills the `{{role}}` slot of the error analyst.
    pub role: String,
    /// Observations longer than this many bytes are cut in analyst prompts.
    pub observation_limit: Option<usize>,
    pub evaluators: Evaluators,
}

impl AnalystConfig {
    pub fn new(success_profile: ModelProfile, error_profile: ModelProfile) -> Self {
        AnalystConfig {
            success_profile,
            error_profile,
            error_budget: 100,
            success_template: template::SUCCESS_ANALYST.to_string(),
            error_template: template::ERROR_ANALYST.to_string(),
            role: "problem-solving".to_string(),
            observation_limit: None,
            evaluators: Evaluators::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ErrorOnly,
    SuccessOnly,
    #[default]
    Combined,
}

impl Selection {
    pub fn runs_error(self) -> bool {
        self != Selection::SuccessOnly
    }

    pub fn runs_success(self) -> bool {
        self != Selection::ErrorOnly
    }
}

/// Accepts either a bare string or an object with title/description/examples.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub(crate) enum MemoryItem {
    Text(String),
    Structured {
        #[serde(default)]
        title: String,
        #[serde(default)]
        description: String,
        #[serde(default)]
        examples: Vec<Value>,
    },
}

impl MemoryItem {
    pub(crate) fn into_text(self) -> String {
        match self {
            MemoryItem::Text(t) => t,
            MemoryItem::Structured { title, description, examples } => {
                let mut out = match (title.is_empty(), description.is_empty()) {
                    (false, false) => format!("{title}: {description}"),
                    (false, true) => title,
                    _ => description,
                };
                for e in examples {
                    let e = e.as_str().map(str::to_string).unwrap_or_else(|| e.to_string());
                    out.push_str(&format!("\n  e.g. {e}"));
                }
                out
            }
        }
    }
}

/// The `patch` object analysts emit; provenance is filled in by us.
#[derive(Debug, Clone, Deserialize)]
pub(crate) struct PatchBody {
    #[serde(default)]
    pub reasoning: String,
    pub edits: Vec<EditOp>,
    #[serde(default)]
    pub changelog_entries: Vec<String>,
}

/// Pulls the JSON object out of a model reply: a fenced `json` block if
/// present, otherwise the span from the first `{` to the last `}`.
pub fn extract_json(text: &str) -> Option<Value> {
    let text = strip_reasoning(text);
    let mut candidates = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let Some(close) = after[body_start..].find("```") else { break };
        candidates.push(&after[body_start..body_start + close]);
        rest = &after[body_start + close + 3..];
    }
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            candidates.push(&text[a..=b]);
        }
    }
    candidates.into_iter().find_map(|c| serde_json::from_str::<Value>(c.trim()).ok().filter(Value::is_object))
}

/// Runs every selected analyst on `workers` threads. Each analyst gets its
/// own clone of `skill`. Runs come back sorted by trajectory id (then
/// analyst kind), and the pool holds the proposed patches in that order.
pub fn dispatch_pool(
    gateway: &Gateway,
    skill: &SkillDir,
    failures: &[Case<'_>],
    successes: &[Case<'_>],
    selection: Selection,
    workers: usize,
    cfg: &AnalystConfig,
) -> Result<(Vec<SkillPatch>, Vec<AnalystRun>), AnalystError> {
    let mut jobs: Vec<(AnalystKind, &Case<'_>)> = Vec::new();
    if selection.runs_error() {
        jobs.extend(failures.iter().map(|c| (AnalystKind::Error, c)));
    }
    if selection.runs_success() {
        jobs.extend(successes.iter().map(|c| (AnalystKind::Success, c)));
    }
    jobs.sort_by(|a, b| (a.1.trajectory.id(), a.0).cmp(&(b.1.trajectory.id(), b.0)));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AnalystError::Pool(e.to_string()))?;
    let results: Vec<Result<AnalystRun, AnalystError>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(kind, case)| {
                let frozen = skill.clone();
                match kind {
                    AnalystKind::Success => analyze_success(gateway, &frozen, case, cfg),
                    AnalystKind::Error => analyze_error(gateway, &frozen, case, cfg),
                }
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let pool: Vec<SkillPatch> = runs.iter().filter_map(|r| r.patch.clone()).collect();
    Ok((pool, runs))
}

/// Number of sequential analyst waves for `n` trajectories on `workers`
/// threads.
pub fn analyst_waves(n: usize, workers: usize) -> usize {
    n.div_ceil(workers.max(1))
}
