use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Consolidation, EvolutionMode, PipelineError};
use crate::analysts::Selection;
use crate::consolidator::{plan_merge_tree, RoundReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { stage: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub trajectories: usize,
    pub failures: usize,
    pub successes: usize,
    /// Lines of an ingested trajectory file that did not parse.
    pub malformed_records: usize,
    pub evolve_success_rate: Option<f64>,
    pub analyst_runs: usize,
    /// Exclusion reason → number of analyst runs excluded for it.
    pub excluded: BTreeMap<String, usize>,
    pub pool_size: usize,
    pub draft_calls: usize,
    /// Rollouts, evolve and test, cut short by a model-endpoint failure.
    #[serde(default)]
    pub aborted_rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub batch_size: usize,
    pub level_cap: u32,
    pub sequential_batches: Vec<usize>,
    /// Merge levels actually run (0 for the sequential baseline).
    pub levels: usize,
    pub merge_calls: usize,
    pub degraded_merges: usize,
    pub withheld_edits: usize,
    pub applied_edits: usize,
    pub rolled_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub initial: f64,
    pub evolved: f64,
}

/// Test-set success rates of the initial and evolved skills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tasks: usize,
    pub initial: f64,
    pub evolved: f64,
    pub per_seed: Vec<SeedScore>,
}

/// Record of one run. Holds no absolute paths, clocks or thread counts, so
/// replaying a run reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: RunStatus,
    pub mode: EvolutionMode,
    pub analyst_selection: Selection,
    pub consolidation: Consolidation,
    pub seeds: Vec<u64>,
    pub observation_limit: Option<usize>,
    /// The configuration as loaded, paths as written.
    pub config: Value,
    /// Input name → sha256.
    pub inputs: BTreeMap<String, String>,
    pub skill_initial_digest: Option<String>,
    pub skill_evolved_digest: Option<String>,
    /// Output name → path relative to the output root.
    pub outputs: BTreeMap<String, String>,
    pub stats: RunStats,
    pub merge: Option<MergeSummary>,
    pub evaluation: Option<Evaluation>,
}

impl RunManifest {
    pub fn new(config: Value, inputs: BTreeMap<String, String>, mode: EvolutionMode, selection: Selection, consolidation: Consolidation, seeds: Vec<u64>, observation_limit: Option<usize>) -> Self {
        let mut h = Sha256::new();
        h.update(crate::gateway::canonical_json(&serde_json::json!({ "config": config, "inputs": inputs })).as_bytes());
        let run_id = hex::encode(&h.finalize()[..8]);
        RunManifest {
            run_id,
            status: RunStatus::Complete,
            mode,
            analyst_selection: selection,
            consolidation,
            seeds,
            observation_limit,
            config,
            inputs,
            skill_initial_digest: None,
            skill_evolved_digest: None,
            outputs: BTreeMap::new(),
            stats: RunStats::default(),
            merge: None,
            evaluation: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Writes `path` through a temporary sibling and a rename.
    pub fn write_atomic(&self, path: &Path) -> Result<(), PipelineError> {
        let tmp = path.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| PipelineError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }
}

/// Round counts of the parallel merge against the sequential baselines for
/// the run's pool size.
pub fn report_rounds(manifest: &RunManifest) -> Result<RoundReport, PipelineError> {
    let merge = manifest.merge.as_ref().ok_or_else(|| PipelineError::Config("manifest has no consolidation record".into()))?;
    let plan = plan_merge_tree(manifest.stats.pool_size, merge.batch_size, merge.level_cap, &merge.sequential_batches)?;
    Ok(RoundReport::from_plan(&plan))
}
