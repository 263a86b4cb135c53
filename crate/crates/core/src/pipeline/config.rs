use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::analysts::{AnalystConfig, Selection};
use crate::consolidator::MergeConfig;
use crate::gateway::ModelProfile;
use crate::rollout::RolloutConfig;
use crate::template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMode {
    /// Start from an existing, human-written skill.
    #[default]
    Deepening,
    /// Start from a skill the model drafts from a domain brief alone.
    Creation,
}

impl FromStr for EvolutionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "deepening" => Ok(EvolutionMode::Deepening),
            "creation" => Ok(EvolutionMode::Creation),
            other => Err(format!("unknown mode {other:?} (deepening or creation)")),
        }
    }
}

/// How the patch pool becomes one update: the merge tree, or the
/// sequential baseline over runs of `B` patches. Written `parallel` or
/// `sequential_B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Consolidation {
    #[default]
    Parallel,
    Sequential(usize),
}

impl fmt::Display for Consolidation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Consolidation::Parallel => f.write_str("parallel"),
            Consolidation::Sequential(b) => write!(f, "sequential_{b}"),
        }
    }
}

impl FromStr for Consolidation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "parallel" {
            return Ok(Consolidation::Parallel);
        }
        match s.strip_prefix("sequential_").map(str::parse::<usize>) {
            Some(Ok(b)) if b >= 1 => Ok(Consolidation::Sequential(b)),
            _ => Err(format!("unknown consolidation {s:?} (parallel or sequential_B with B >= 1)")),
        }
    }
}

impl TryFrom<String> for Consolidation {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Consolidation> for String {
    fn from(c: Consolidation) -> String {
        c.to_string()
    }
}

pub fn parse_selection(s: &str) -> Result<Selection, String> {
    match s {
        "error_only" | "error" => Ok(Selection::ErrorOnly),
        "success_only" | "success" => Ok(Selection::SuccessOnly),
        "combined" => Ok(Selection::Combined),
        other => Err(format!("unknown analyst selection {other:?} (error_only, success_only or combined)")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfiles {
    pub rollout: ModelProfile,
    pub success: ModelProfile,
    pub error: ModelProfile,
    pub merge: ModelProfile,
    /// Drafting profile for creation runs; the success profile when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<ModelProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSection {
    pub turn_budget: usize,
    pub role: String,
    pub tool_timeout_secs: u64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection { turn_budget: 100, role: "problem-solving".into(), tool_timeout_secs: 120 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    pub error_budget: usize,
    /// Observations longer than this many bytes are cut in analyst prompts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation_limit: Option<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { error_budget: 100, observation_limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeSection {
    pub batch_size: usize,
    pub level_cap: u32,
    /// Batch sizes of the sequential baselines in the rounds report.
    pub sequential_batches: Vec<usize>,
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection { batch_size: 32, level_cap: 8, sequential_batches: vec![4] }
    }
}

/// Optional prompt template overrides; the bundled ones are used otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplatePaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draft: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repair: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![41, 42, 43]
}

fn default_workers() -> usize {
    8
}

/// Everything one run needs. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub mode: EvolutionMode,
    /// Initial skill directory (deepening only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<PathBuf>,
    /// Domain brief for the drafted skill (creation only), inline or as a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_brief: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_brief_file: Option<PathBuf>,
    pub evolve_tasks: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_tasks: Option<PathBuf>,
    /// Pre-collected evolve trajectories to analyse instead of running Stage 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<PathBuf>,
    #[serde(default)]
    pub analysts: Selection,
    #[serde(default)]
    pub consolidation: Consolidation,
    /// Generation seeds. Evolve rollouts use the first; the test set is
    /// run once per seed and the success rates averaged.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Thread count of every fan-out. Left out of the manifest: it never
    /// changes the outputs.
    #[serde(default = "default_workers", skip_serializing)]
    pub workers: usize,
    /// Environment variable holding the API key of live endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub profiles: StageProfiles,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub templates: TemplatePaths,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        match self.mode {
            EvolutionMode::Deepening => {
                if self.skill.is_none() {
                    return bad("deepening mode needs `skill`");
                }
                if self.domain_brief.is_some() || self.domain_brief_file.is_some() {
                    return bad("deepening mode takes no domain brief");
                }
            }
            EvolutionMode::Creation => {
                if self.skill.is_some() {
                    return bad("creation mode starts without a skill; drop `skill`");
                }
                if self.domain_brief.is_some() == self.domain_brief_file.is_some() {
                    return bad("creation mode needs exactly one of `domain_brief` and `domain_brief_file`");
                }
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is needed");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.merge.batch_size < 2 {
            return bad("merge batch_size must be at least 2");
        }
        if self.merge.level_cap < 1 {
            return bad("merge level_cap must be at least 1");
        }
        if self.rollout.turn_budget == 0 || self.analysis.error_budget == 0 {
            return bad("turn budgets must be at least 1");
        }
        for p in [&self.profiles.rollout, &self.profiles.success, &self.profiles.error, &self.profiles.merge] {
            if p.concurrency_cap == 0 {
                return bad("concurrency_cap must be at least 1");
            }
        }
        Ok(())
    }

    fn template(&self, path: &Option<PathBuf>, default: &str) -> Result<String, PipelineError> {
        let resolved = path.as_ref().map(|p| self.resolve(p));
        template::load_or(resolved.as_deref(), default)
            .map_err(|e| PipelineError::Config(format!("template {}: {e}", resolved.unwrap_or_default().display())))
    }

    pub fn draft_profile(&self) -> &ModelProfile {
        self.profiles.draft.as_ref().unwrap_or(&self.profiles.success)
    }

    pub fn rollout_config(&self, seed: u64) -> Result<RolloutConfig, PipelineError> {
        let mut profile = self.profiles.rollout.clone();
        profile.generation.seed = Some(seed);
        let mut c = RolloutConfig::new(profile);
        c.turn_budget = self.rollout.turn_budget;
        c.role = self.rollout.role.clone();
        c.tool_timeout = Duration::from_secs(self.rollout.tool_timeout_secs.max(1));
        c.system_prompt_template = self.template(&self.templates.agent, template::AGENT_SYSTEM)?;
        Ok(c)
    }

    pub fn analyst_config(&self) -> Result<AnalystConfig, PipelineError> {
        let mut c = AnalystConfig::new(self.profiles.success.clone(), self.profiles.error.clone());
        c.error_budget = self.analysis.error_budget;
        c.observation_limit = self.analysis.observation_limit;
        c.role = self.rollout.role.clone();
        c.success_template = self.template(&self.templates.success, template::SUCCESS_ANALYST)?;
        c.error_template = self.template(&self.templates.error, template::ERROR_ANALYST)?;
        Ok(c)
    }

    pub fn merge_config(&self) -> Result<MergeConfig, PipelineError> {
        let mut c = MergeConfig::new(self.profiles.merge.clone());
        c.batch_size = self.merge.batch_size;
        c.level_cap = self.merge.level_cap;
        c.sequential_batches = self.merge.sequential_batches.clone();
        if let Consolidation::Sequential(b) = self.consolidation {
            if !c.sequential_batches.contains(&b) {
                c.sequential_batches.push(b);
                c.sequential_batches.sort_unstable();
            }
        }
        c.workers = self.workers;
        c.template = self.template(&self.templates.merge, template::MERGE)?;
        Ok(c)
    }

    pub fn draft_prompts(&self) -> Result<super::DraftPrompts, PipelineError> {
        Ok(super::DraftPrompts {
            draft: self.template(&self.templates.draft, template::DRAFT_SKILL)?,
            repair: self.template(&self.templates.repair, template::DRAFT_REPAIR)?,
        })
    }

    pub fn domain_brief(&self) -> Result<Option<String>, PipelineError> {
        if let Some(b) = &self.domain_brief {
            return Ok(Some(b.clone()));
        }
        match &self.domain_brief_file {
            Some(p) => fs::read_to_string(self.resolve(p))
                .map(Some)
                .map_err(|e| PipelineError::Config(format!("domain brief {}: {e}", p.display()))),
            None => Ok(None),
        }
    }
}
