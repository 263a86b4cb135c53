//! End-to-end runs: initial skill, rollouts, analysts, consolidation,
//! test-set scoring, and the manifest that records it all.

mod config;
mod draft;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    parse_selection, AnalysisSection, Consolidation, EvolutionMode, MergeSection, PipelineConfig, RolloutSection, StageProfiles,
    TemplatePaths,
};
pub use draft::{draft_parametric_skill, DraftPrompts};
pub use manifest::{report_rounds, Evaluation, MergeSummary, RunManifest, RunStats, RunStatus, SeedScore};

use crate::analysts::{dispatch_pool, AnalystError, AnalystRun, Case};
use crate::consolidator::{consolidate, consolidate_sequential, ConsolidateError, RoundReport};
use crate::gateway::{Gateway, GatewayError};
use crate::patch::SkillPatch;
use crate::rollout::{artifact_name, copy_tree, evaluate, rollout, stage_sandbox, Evaluators, RolloutConfig, RolloutError, ToolExecutor};
use crate::skill::{load_skill, save_skill, SkillDir, SkillError};
use crate::trajectory::{
    check_disjoint, ingest, partition, save_jsonl, success_rate, GroundTruth, StoreError, TaskSet, Trajectory, DEFAULT_INLINE_LIMIT,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("output directory {0} is not empty")]
    OutputInUse(PathBuf),
    #[error("drafted skill is still invalid after repair:\n{}", .0.join("\n"))]
    DraftInvalid(Vec<String>),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Analyst(#[from] AnalystError),
    #[error(transparent)]
    Consolidate(#[from] ConsolidateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("serializable"));
        text.push('\n');
    }
    write_file(path, text)
}

/// Creates `out`, refusing one that already holds anything.
pub fn prepare_output(out: &Path) -> Result<(), PipelineError> {
    if out.exists() && fs::read_dir(out).map_err(|e| PipelineError::io(out, e))?.next().is_some() {
        return Err(PipelineError::OutputInUse(out.to_path_buf()));
    }
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))
}

fn hash_tree(h: &mut Sha256, base: &Path, rel: &str) -> Result<(), PipelineError> {
    let root = base.join(rel);
    for entry in walkdir::WalkDir::new(&root).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::io(&root, e.into()))?;
        if entry.file_type().is_file() {
            let sub = entry.path().strip_prefix(base).unwrap_or(entry.path());
            h.update(sub.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(entry.path()).map_err(|e| PipelineError::io(entry.path(), e))?);
            h.update([0]);
        }
    }
    Ok(())
}

/// sha256 over a task file and every input and ground-truth file it names.
pub fn task_set_digest(file: &Path, set: &TaskSet) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    h.update(fs::read(file).map_err(|e| PipelineError::io(file, e))?);
    for t in &set.tasks {
        for input in &t.input_paths {
            hash_tree(&mut h, &set.base_dir, input)?;
        }
        if let GroundTruth::File { path, .. } = &t.ground_truth {
            hash_tree(&mut h, &set.base_dir, path)?;
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

/// Rolls the agent out on every task of `tasks` with `skill` preloaded,
/// `workers` tasks at a time. Task `t` runs in `out_root/sub/<t>`, which
/// becomes the trajectory's (relative) artifact directory. Trajectories
/// come back evaluated and in task order.
pub fn run_rollouts(
    gateway: &Gateway,
    tasks: &TaskSet,
    skill: &SkillDir,
    cfg: &RolloutConfig,
    evaluators: &Evaluators,
    workers: usize,
    out_root: &Path,
    sub: &str,
) -> Result<Vec<Trajectory>, PipelineError> {
    let names: BTreeSet<String> = tasks.tasks.iter().map(|t| artifact_name(&t.task_id)).collect();
    if names.len() != tasks.tasks.len() {
        return Err(PipelineError::Config("two task ids map to the same artifact directory name".into()));
    }
    let executor = ToolExecutor::standard(cfg.tool_timeout);
    let pool = thread_pool(workers)?;
    let results: Vec<Result<Trajectory, PipelineError>> = pool.install(|| {
        use rayon::prelude::*;
        tasks
            .tasks
            .par_iter()
            .map(|task| {
                let rel = format!("{sub}/{}", artifact_name(&task.task_id));
                let dir = out_root.join(&rel);
                let sandbox = stage_sandbox(task, &tasks.base_dir, skill, &dir)?;
                let mut traj = rollout(gateway, task, skill, cfg, &executor, &sandbox)?;
                evaluate(evaluators, &mut traj, task, &dir, &tasks.base_dir)?;
                traj.artifact_dir = rel;
                traj.offload_observations(&dir, DEFAULT_INLINE_LIMIT).map_err(|e| PipelineError::io(&dir, e))?;
                Ok(traj)
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Loads pre-collected trajectories, copies their artifact directories to
/// `out_root/artifacts/` and grades any that carry no outcome yet.
/// Returns the trajectories and the number of malformed records skipped.
pub fn ingest_trajectories(
    path: &Path,
    tasks: &TaskSet,
    evaluators: &Evaluators,
    out_root: &Path,
) -> Result<(Vec<Trajectory>, usize), PipelineError> {
    let report = ingest(path)?;
    for m in &report.malformed {
        log::warn!("{}:{}: skipped malformed record: {}", path.display(), m.line, m.message);
    }
    let source_base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(report.trajectories.len());
    for mut t in report.trajectories {
        let task = tasks
            .get(&t.task_id)
            .ok_or_else(|| PipelineError::Config(format!("trajectory for unknown task {:?}", t.task_id)))?;
        let name = artifact_name(&t.id());
        if !seen.insert(name.clone()) {
            return Err(PipelineError::Config(format!("duplicate trajectory {:?}", t.id())));
        }
        let rel = format!("artifacts/{name}");
        let dest = out_root.join(&rel);
        let src = t.artifact_path(source_base);
        if !t.artifact_dir.is_empty() && src.is_dir() {
            copy_tree(&src, &dest).map_err(|e| PipelineError::io(&src, e))?;
        } else {
            fs::create_dir_all(&dest).map_err(|e| PipelineError::io(&dest, e))?;
        }
        t.artifact_dir = rel;
        if t.outcome.is_none() {
            evaluate(evaluators, &mut t, task, &dest, &tasks.base_dir)?;
        }
        out.push(t);
    }
    Ok((out, report.malformed.len()))
}

/// Analyst cases for `trajectories`, whose artifact directories are
/// relative to `artifact_base`.
pub fn cases<'a>(trajectories: &[&'a Trajectory], tasks: &'a TaskSet, artifact_base: &Path) -> Result<Vec<Case<'a>>, PipelineError> {
    trajectories
        .iter()
        .map(|t| {
            let task = tasks
                .get(&t.task_id)
                .ok_or_else(|| PipelineError::Config(format!("trajectory for unknown task {:?}", t.task_id)))?;
            Ok(Case { trajectory: t, task, task_base: &tasks.base_dir, artifacts: t.artifact_path(artifact_base) })
        })
        .collect()
}

/// Writes `patches` as `dir/NNNN.json`.
pub fn write_pool_level(dir: &Path, patches: &[SkillPatch]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    for (i, p) in patches.iter().enumerate() {
        write_json(&dir.join(format!("{i:04}.json")), p)?;
    }
    Ok(())
}

/// Reads every `*.json` patch in `dir`, in file-name order.
pub fn load_pool(dir: &Path) -> Result<Vec<SkillPatch>, PipelineError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Writes `reports/rounds.txt` and `reports/rounds.json` under `out`.
pub fn write_rounds(out: &Path, report: &RoundReport) -> Result<(), PipelineError> {
    write_file(&out.join("reports/rounds.txt"), report.to_text())?;
    write_json(&out.join("reports/rounds.json"), report)
}

fn staged<T, E: Into<PipelineError>>(stage: &'static str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Stage { stage, source: Box::new(e.into()) })
}

/// Runs the whole pipeline into the empty directory `out`.
///
/// Everything written below `out` is a function of the config, its inputs
/// and the model replies; with the replay backend two runs produce the same
/// bytes whatever the worker count. A failing stage still leaves a manifest,
/// flagged with the stage.
pub fn run(cfg: &PipelineConfig, gateway: &Gateway, out: &Path) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let evolve_path = cfg.resolve(&cfg.evolve_tasks);
    let evolve = TaskSet::load(&evolve_path)?;
    let test_path = cfg.test_tasks.as_ref().map(|p| cfg.resolve(p));
    let test = test_path.as_deref().map(TaskSet::load).transpose()?;
    if let Some(test) = &test {
        check_disjoint(&evolve, test)?;
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("evolve_tasks".to_string(), task_set_digest(&evolve_path, &evolve)?);
    if let (Some(p), Some(set)) = (&test_path, &test) {
        inputs.insert("test_tasks".to_string(), task_set_digest(p, set)?);
    }
    if let Some(p) = &cfg.trajectories {
        inputs.insert("trajectories".to_string(), file_digest(&cfg.resolve(p))?);
    }
    let initial = match cfg.mode {
        EvolutionMode::Deepening => {
            let skill = load_skill(&cfg.resolve(cfg.skill.as_ref().expect("validated")))?;
            inputs.insert("skill".to_string(), skill.digest());
            Some(skill)
        }
        EvolutionMode::Creation => {
            let brief = cfg.domain_brief()?.expect("validated");
            inputs.insert("domain_brief".to_string(), hex::encode(Sha256::digest(brief.as_bytes())));
            None
        }
    };
    prepare_output(out)?;

    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    let mut manifest = RunManifest::new(
        snapshot,
        inputs,
        cfg.mode,
        cfg.analysts,
        cfg.consolidation,
        cfg.seeds.clone(),
        cfg.analysis.observation_limit,
    );
    let result = run_stages(cfg, gateway, out, &evolve, test.as_ref(), initial, &mut manifest);
    if let Err(PipelineError::Stage { stage, source }) = &result {
        manifest.status = RunStatus::Failed { stage: stage.to_string(), message: source.to_string() };
    } else if let Err(e) = &result {
        manifest.status = RunStatus::Failed { stage: "setup".into(), message: e.to_string() };
    }
    manifest.write_atomic(&out.join("manifest.json"))?;
    result.map(|()| manifest)
}

fn run_stages(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    out: &Path,
    evolve: &TaskSet,
    test: Option<&TaskSet>,
    initial: Option<SkillDir>,
    manifest: &mut RunManifest,
) -> Result<(), PipelineError> {
    let acfg = cfg.analyst_config()?;
    let mcfg = cfg.merge_config()?;
    let rcfg = cfg.rollout_config(cfg.seeds[0])?;

    let s0 = match initial {
        Some(s) => s,
        None => {
            let brief = cfg.domain_brief()?.expect("validated");
            let (skill, calls) = staged("draft", draft_parametric_skill(gateway, &brief, cfg.draft_profile(), &cfg.draft_prompts()?))?;
            manifest.stats.draft_calls = calls;
            skill
        }
    };
    staged("draft", save_skill(&s0, &out.join("skill_initial")))?;
    manifest.skill_initial_digest = Some(s0.digest());
    manifest.outputs.insert("skill_initial".into(), "skill_initial".into());

    // Stage 1
    let trajectories = match &cfg.trajectories {
        Some(p) => {
            let (ts, malformed) = staged("ingest", ingest_trajectories(&cfg.resolve(p), evolve, &acfg.evaluators, out))?;
            manifest.stats.malformed_records = malformed;
            ts
        }
        None => staged("rollout", run_rollouts(gateway, evolve, &s0, &rcfg, &acfg.evaluators, cfg.workers, out, "artifacts"))?,
    };
    staged("rollout", save_jsonl(&out.join("trajectories.jsonl"), &trajectories))?;
    manifest.outputs.insert("trajectories".into(), "trajectories.jsonl".into());
    manifest.outputs.insert("artifacts".into(), "artifacts".into());
    let parts = staged("rollout", partition(&trajectories))?;
    manifest.stats.trajectories = trajectories.len();
    manifest.stats.aborted_rollouts = trajectories.iter().filter(|t| t.aborted).count();
    manifest.stats.failures = parts.failures.len();
    manifest.stats.successes = parts.successes.len();
    manifest.stats.evolve_success_rate = success_rate(&trajectories).ok();

    // Stage 2
    let failures = staged("analysis", cases(&parts.failures, evolve, out))?;
    let successes = staged("analysis", cases(&parts.successes, evolve, out))?;
    let (pool, runs) = staged("analysis", dispatch_pool(gateway, &s0, &failures, &successes, cfg.analysts, cfg.workers, &acfg))?;
    staged("analysis", write_jsonl(&out.join("analysis/runs.jsonl"), &runs))?;
    staged("analysis", write_pool_level(&out.join("pool/level-0"), &pool))?;
    manifest.outputs.insert("analysis".into(), "analysis/runs.jsonl".into());
    manifest.outputs.insert("pool".into(), "pool".into());
    manifest.stats.analyst_runs = runs.len();
    manifest.stats.excluded = exclusion_counts(&runs);
    manifest.stats.pool_size = pool.len();

    // Stage 3
    let mut summary = MergeSummary {
        batch_size: mcfg.batch_size,
        level_cap: mcfg.level_cap,
        sequential_batches: mcfg.sequential_batches.clone(),
        levels: 0,
        merge_calls: 0,
        degraded_merges: 0,
        withheld_edits: 0,
        applied_edits: 0,
        rolled_back: false,
    };
    let (evolved, diff) = if pool.is_empty() {
        log::warn!("the patch pool is empty; the skill is left unchanged");
        (s0.clone(), String::new())
    } else {
        match cfg.consolidation {
            Consolidation::Parallel => {
                let r = staged("consolidation", consolidate(gateway, &s0, &pool, &mcfg))?;
                for (l, level) in r.per_level_patches.iter().enumerate().skip(1) {
                    staged("consolidation", write_pool_level(&out.join(format!("pool/level-{l}")), level))?;
                }
                staged("consolidation", write_jsonl(&out.join("pool/merges.jsonl"), &r.merges))?;
                staged("consolidation", write_json(&out.join("pool/final.json"), &r.final_patch))?;
                summary.levels = r.plan.depth();
                summary.merge_calls = r.merge_calls();
                summary.degraded_merges = r.merges.iter().filter(|m| m.degraded).count();
                summary.withheld_edits = r.merges.iter().map(|m| m.screened.withheld().len()).sum::<usize>() + r.conflicts.withheld().len();
                summary.applied_edits = r.applied_edits.len();
                summary.rolled_back = r.rolled_back;
                (r.evolved_skill, r.diff)
            }
            Consolidation::Sequential(b) => {
                let r = staged("consolidation", consolidate_sequential(gateway, &s0, &pool, b, &mcfg))?;
                let dir = out.join("pool/sequential");
                for (k, step) in r.steps.iter().enumerate() {
                    staged("consolidation", write_json(&dir.join(format!("step-{k:04}.json")), step))?;
                }
                summary.merge_calls = r.steps.iter().map(|s| s.calls).sum();
                summary.applied_edits = r.steps.iter().map(|s| s.applied_edits.len()).sum();
                summary.rolled_back = r.steps.iter().any(|s| s.skipped);
                (r.evolved_skill, r.diff)
            }
        }
    };
    staged("consolidation", save_skill(&evolved, &out.join("evolved_skill")))?;
    staged("consolidation", write_file(&out.join("evolved.diff"), &diff))?;
    manifest.skill_evolved_digest = Some(evolved.digest());
    manifest.outputs.insert("evolved_skill".into(), "evolved_skill".into());
    manifest.outputs.insert("diff".into(), "evolved.diff".into());
    manifest.merge = Some(summary);
    if !pool.is_empty() {
        let report = staged("report", report_rounds(manifest))?;
        staged("report", write_rounds(out, &report))?;
        manifest.outputs.insert("rounds_report".into(), "reports/rounds.txt".into());
    }

    // Scoring on the held-out tasks
    if let Some(test) = test {
        manifest.outputs.insert("test".into(), "test".into());
        let mut per_seed = Vec::new();
        let mut aborted = 0;
        for &seed in &cfg.seeds {
            let rcfg = cfg.rollout_config(seed)?;
            let mut score = |label: &str, skill: &SkillDir| -> Result<f64, PipelineError> {
                let sub = format!("test/{label}/seed-{seed}");
                let ts = run_rollouts(gateway, test, skill, &rcfg, &acfg.evaluators, cfg.workers, out, &format!("{sub}/artifacts"))?;
                save_jsonl(&out.join(format!("{sub}/trajectories.jsonl")), &ts)?;
                aborted += ts.iter().filter(|t| t.aborted).count();
                Ok(success_rate(&ts)?)
            };
            let initial = staged("evaluation", score("initial", &s0))?;
            let evolved = staged("evaluation", score("evolved", &evolved))?;
            per_seed.push(SeedScore { seed, initial, evolved });
        }
        let mean = |f: fn(&SeedScore) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
        manifest.stats.aborted_rollouts += aborted;
        manifest.evaluation = Some(Evaluation {
            tasks: test.tasks.len(),
            initial: mean(|s| s.initial),
            evolved: mean(|s| s.evolved),
            per_seed,
        });
    }
    Ok(())
}

fn exclusion_counts(runs: &[AnalystRun]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in runs {
        if let Some(reason) = r.verdict.exclusion_reason {
            let key = serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            *out.entry(key).or_insert(0) += 1;
        }
    }
    out
}
