//! Stage 3: hierarchical merging of the patch pool and guarded application.

mod merge;
mod plan;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use merge::{merge_batch, prescreen, render_patches, MergeOutput, MergeRecord};
pub use plan::{levels_needed, plan_merge_tree, MergePlan, RoundReport, RoundRow};

use crate::gateway::{Gateway, ModelProfile};
use crate::patch::{apply_patch, ConflictReport, SkillPatch};
use crate::skill::{SkillDir, ValidationReport};
use crate::template;

#[derive(Debug, Error)]
pub enum ConsolidateError {
    #[error("the patch pool is empty")]
    EmptyPool,
    #[error("invalid merge configuration: {0}")]
    InvalidConfig(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct MergeConfig {
    pub batch_size: usize,
    pub level_cap: u32,
    pub profile: ModelProfile,
    pub template: String,
    /// Batch sizes of the sequential baselines reported next to the tree.
    pub sequential_batches: Vec<usize>,
    /// Threads running the merges of one level.
    pub workers: usize,
}

impl MergeConfig {
    pub fn new(profile: ModelProfile) -> Self {
        MergeConfig {
            batch_size: 32,
            level_cap: 8,
            profile,
            template: template::MERGE.to_string(),
            sequential_batches: vec![4],
            workers: 128,
        }
    }

    pub fn plan(&self, n: usize) -> Result<MergePlan, ConsolidateError> {
        plan_merge_tree(n, self.batch_size, self.level_cap, &self.sequential_batches)
    }
}

#[derive(Debug, Clone)]
pub struct ConsolidationResult {
    pub plan: MergePlan,
    pub final_patch: SkillPatch,
    pub evolved_skill: SkillDir,
    pub conflicts: ConflictReport,
    pub validation: ValidationReport,
    pub diff: String,
    /// `per_level_patches[0]` is the pool; entry `l` holds level `l`'s outputs.
    pub per_level_patches: Vec<Vec<SkillPatch>>,
    pub merges: Vec<MergeRecord>,
    pub applied_edits: Vec<usize>,
    /// Application failed validation and the input skill was kept.
    pub rolled_back: bool,
}

impl ConsolidationResult {
    pub fn merge_calls(&self) -> usize {
        self.merges.iter().map(|m| m.calls).sum()
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, ConsolidateError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| ConsolidateError::Pool(e.to_string()))
}

/// Runs the merge tree level by level (groups of a level concurrently) and
/// applies the root patch to `skill`.
pub fn consolidate(gateway: &Gateway, skill: &SkillDir, pool: &[SkillPatch], cfg: &MergeConfig) -> Result<ConsolidationResult, ConsolidateError> {
    let plan = cfg.plan(pool.len())?;
    let threads = thread_pool(cfg.workers)?;
    let mut archive = vec![pool.to_vec()];
    let mut merges = Vec::new();
    for (l, groups) in plan.levels.iter().enumerate() {
        let previous = archive.last().expect("level 0 present");
        let outputs: Vec<MergeOutput> = threads.install(|| {
            use rayon::prelude::*;
            groups
                .par_iter()
                .enumerate()
                .map(|(g, members)| {
                    let inputs: Vec<SkillPatch> = members.iter().map(|&i| previous[i].clone()).collect();
                    merge_batch(gateway, skill, &inputs, cfg, l as u32 + 1, g)
                })
                .collect()
        });
        let mut level = Vec::with_capacity(outputs.len());
        for out in outputs {
            merges.push(out.record);
            level.push(out.patch);
        }
        archive.push(level);
    }
    let final_patch = archive.last().expect("non-empty")[0].clone();
    let applied = apply_patch(skill, &final_patch);
    if applied.rolled_back {
        log::warn!("final patch failed validation; keeping the input skill");
    }
    Ok(ConsolidationResult {
        plan,
        final_patch,
        evolved_skill: applied.skill,
        conflicts: applied.conflicts,
        validation: applied.validation,
        diff: applied.diff,
        per_level_patches: archive,
        merges,
        applied_edits: applied.applied_edits,
        rolled_back: applied.rolled_back,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialStep {
    /// Pool indices merged in this step.
    pub members: Vec<usize>,
    pub patch: SkillPatch,
    pub calls: usize,
    pub applied_edits: Vec<usize>,
    pub skipped: bool,
    pub diff: String,
}

#[derive(Debug, Clone)]
pub struct SequentialResult {
    pub batch: usize,
    pub steps: Vec<SequentialStep>,
    pub evolved_skill: SkillDir,
    /// Diff from the input skill to the final one.
    pub diff: String,
}

impl SequentialResult {
    pub fn rounds(&self) -> usize {
        self.steps.len()
    }
}

/// Baseline: merge each run of `batch` pool patches and apply it to the
/// current skill before moving on, so later merges see earlier updates.
/// Steps whose application fails validation are skipped.
pub fn consolidate_sequential(
    gateway: &Gateway,
    skill: &SkillDir,
    pool: &[SkillPatch],
    batch: usize,
    cfg: &MergeConfig,
) -> Result<SequentialResult, ConsolidateError> {
    if pool.is_empty() {
        return Err(ConsolidateError::EmptyPool);
    }
    if batch == 0 {
        return Err(ConsolidateError::InvalidConfig("sequential batch must be at least 1".into()));
    }
    let mut current = skill.clone();
    let mut steps = Vec::new();
    for (k, chunk) in pool.chunks(batch).enumerate() {
        let members: Vec<usize> = (k * batch..k * batch + chunk.len()).collect();
        let (patch, calls) = if chunk.len() == 1 {
            (chunk[0].clone(), 0)
        } else {
            let out = merge_batch(gateway, &current, chunk, cfg, 1, k);
            (out.patch, out.record.calls)
        };
        let applied = apply_patch(&current, &patch);
        if applied.rolled_back {
            log::warn!("sequential step {k}: update failed validation, skipped");
        }
        steps.push(SequentialStep {
            members,
            patch,
            calls,
            applied_edits: applied.applied_edits,
            skipped: applied.rolled_back,
            diff: applied.diff,
        });
        current = applied.skill;
    }
    let diff = crate::patch::diff::unified_diff(skill, &current);
    Ok(SequentialResult { batch, steps, evolved_skill: current, diff })
}
