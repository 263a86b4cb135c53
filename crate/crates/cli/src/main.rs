//! `skill-distill`: evolve an agent skill from execution trajectories, or run
//! one stage at a time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use skill_distill::analysts::{dispatch_pool, Selection};
use skill_distill::consolidator::{consolidate, consolidate_sequential, plan_merge_tree, RoundReport};
use skill_distill::gateway::{FixtureStore, Gateway, LiveBackend, RetryPolicy};
use skill_distill::patch::{apply_patch, SkillPatch};
use skill_distill::pipeline::{
    cases, draft_parametric_skill, ingest_trajectories, load_pool, parse_selection, prepare_output, report_rounds, run, run_rollouts, write_file,
    write_json, write_jsonl, write_pool_level, write_rounds, Consolidation, EvolutionMode, PipelineConfig, RunManifest, RunStatus,
};
use skill_distill::skill::{load_skill, save_skill, validate_skill, Severity, SkillDir};
use skill_distill::trajectory::{partition, save_jsonl, success_rate, TaskSet};

const DEFAULT_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Parser)]
#[command(name = "skill-distill", version, about = "Distill agent trajectories into an evolved skill directory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full run: rollouts, analysis, consolidation and test-set scoring.
    Evolve {
        #[command(flatten)]
        run: RunArgs,
        /// Analyze these pre-collected trajectories instead of rolling out.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Roll the agent out on a task set with a skill preloaded.
    Rollout {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "evolve")]
        tasks: TaskChoice,
        /// Skill to preload; defaults to the configured skill.
        #[arg(long)]
        skill: Option<PathBuf>,
    },
    /// Run the analysts over a trajectory file and write the patch pool.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        skill: Option<PathBuf>,
    },
    /// Merge a patch pool into one update and apply it.
    Consolidate {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of patch JSON files, e.g. `pool/level-0` of an analyze run.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        skill: Option<PathBuf>,
    },
    /// Draft a skill from the domain brief alone.
    Draft {
        #[command(flatten)]
        run: RunArgs,
        /// Brief file; defaults to the configured brief.
        #[arg(long)]
        brief: Option<PathBuf>,
    },
    /// Apply one patch file to a skill directory.
    Apply {
        #[arg(long)]
        skill: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// Directory for the updated skill; must not exist or be empty.
        #[arg(long)]
        out: PathBuf,
        /// Write the unified diff here instead of stdout.
        #[arg(long)]
        diff: Option<PathBuf>,
    },
    /// Check a skill directory's format.
    Validate { skill: PathBuf },
    /// Round counts of the merge tree against the sequential baselines.
    Report {
        #[arg(long, conflicts_with = "pool_size")]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        pool_size: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        level_cap: u32,
        /// Sequential baseline batch sizes besides 1.
        #[arg(long = "sequential-batch", default_values_t = [4])]
        sequential_batches: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskChoice {
    Evolve,
    Test,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum BackendChoice {
    Live,
    Replay,
}

/// Flags shared by every command that talks to a model. Each overrides
/// the matching config entry.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<EvolutionMode>,
    #[arg(long, value_parser = parse_selection)]
    analysts: Option<Selection>,
    /// Use the sequential baseline with this batch size instead of the merge tree.
    #[arg(long)]
    sequential_batch: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Repeat for several seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Defaults to replay when --fixtures is given, live otherwise.
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Record every exchange into this fixture directory.
    #[arg(long)]
    record: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.analysts {
            cfg.analysts = s;
        }
        if let Some(b) = self.sequential_batch {
            if b == 0 {
                bail!("--sequential-batch must be at least 1");
            }
            cfg.consolidation = Consolidation::Sequential(b);
        }
        if let Some(w) = self.workers {
            cfg.workers = w.max(1);
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        Ok(cfg)
    }

    fn gateway(&self, cfg: &PipelineConfig) -> Result<Gateway> {
        let backend = self.backend.unwrap_or(if self.fixtures.is_some() { BackendChoice::Replay } else { BackendChoice::Live });
        let gateway = match backend {
            BackendChoice::Replay => {
                let dir = self.fixtures.as_ref().context("--backend replay needs --fixtures DIR")?;
                if !dir.is_dir() {
                    bail!("fixture directory {} does not exist", dir.display());
                }
                Gateway::replay(FixtureStore::new(dir))
            }
            BackendChoice::Live => {
                let var = cfg.api_key_env.as_deref().unwrap_or(DEFAULT_KEY_ENV);
                let key = std::env::var(var).ok().filter(|k| !k.is_empty());
                if key.is_none() {
                    log::warn!("{var} is not set; sending requests without an API key");
                }
                Gateway::new(Arc::new(LiveBackend::new(key, RetryPolicy::default(), Duration::from_secs(600))))
            }
        };
        Ok(match &self.record {
            Some(dir) => gateway.recording(FixtureStore::new(dir)),
            None => gateway,
        })
    }
}

fn initial_skill(cfg: &PipelineConfig, flag: Option<&Path>) -> Result<SkillDir> {
    let path = match (flag, &cfg.skill) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => cfg.resolve(p),
        (None, None) => bail!("no skill given; pass --skill or set `skill` in the config (run `draft` first for a creation run)"),
    };
    load_skill(&path).with_context(|| format!("loading skill {}", path.display()))
}

fn print_manifest(m: &RunManifest, out: &Path) {
    let s = &m.stats;
    println!("run {} ({}, {}, {})", m.run_id, wire_name(&m.mode), m.consolidation, wire_name(&m.analyst_selection));
    println!("trajectories: {} ({} failed, {} succeeded)", s.trajectories, s.failures, s.successes);
    println!("analyst runs: {}, patches pooled: {}, excluded: {:?}", s.analyst_runs, s.pool_size, s.excluded);
    if let Some(merge) = &m.merge {
        println!("merge calls: {}, applied edits: {}, rolled back: {}", merge.merge_calls, merge.applied_edits, merge.rolled_back);
        if merge.degraded_merges > 0 {
            log::warn!("{} merges fell back to concatenating their inputs", merge.degraded_merges);
        }
    }
    if s.aborted_rollouts > 0 {
        log::warn!("{} rollouts stopped on a model-endpoint failure and count as failures", s.aborted_rollouts);
    }
    if let Some(e) = &m.evaluation {
        println!("test success rate: {:.4} -> {:.4} over {} tasks and {} seeds", e.initial, e.evolved, e.tasks, e.per_seed.len());
    }
    println!("outputs in {}", out.display());
}

fn evolve(args: &RunArgs, trajectories: Option<&Path>) -> Result<bool> {
    let mut cfg = args.config()?;
    if let Some(t) = trajectories {
        cfg.trajectories = Some(std::path::absolute(t)?);
    }
    let gateway = args.gateway(&cfg)?;
    match run(&cfg, &gateway, &args.out) {
        Ok(m) => {
            print_manifest(&m, &args.out);
            Ok(true)
        }
        Err(e) => {
            let manifest = args.out.join("manifest.json");
            if let Ok(RunManifest { status: RunStatus::Failed { stage, .. }, .. }) = RunManifest::load(&manifest) {
                eprintln!("run failed in the {stage} stage; partial manifest at {}", manifest.display());
                eprintln!("{e}");
                return Ok(false);
            }
            Err(e.into())
        }
    }
}

fn rollout_cmd(args: &RunArgs, which: TaskChoice, skill: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    let path = match which {
        TaskChoice::Evolve => cfg.resolve(&cfg.evolve_tasks),
        TaskChoice::Test => cfg.resolve(cfg.test_tasks.as_ref().context("config has no test_tasks")?),
    };
    let tasks = TaskSet::load(&path)?;
    let skill = initial_skill(&cfg, skill)?;
    let gateway = args.gateway(&cfg)?;
    prepare_output(&args.out)?;
    let rcfg = cfg.rollout_config(cfg.seeds[0])?;
    let evaluators = cfg.analyst_config()?.evaluators;
    let ts = run_rollouts(&gateway, &tasks, &skill, &rcfg, &evaluators, cfg.workers, &args.out, "artifacts")?;
    save_jsonl(&args.out.join("trajectories.jsonl"), &ts)?;
    println!("{} trajectories, success rate {:.4}", ts.len(), success_rate(&ts)?);
    println!("wrote {}", args.out.join("trajectories.jsonl").display());
    Ok(())
}

fn analyze_cmd(args: &RunArgs, trajectories: &Path, skill: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    let tasks = TaskSet::load(&cfg.resolve(&cfg.evolve_tasks))?;
    let skill = initial_skill(&cfg, skill)?;
    let gateway = args.gateway(&cfg)?;
    prepare_output(&args.out)?;
    let acfg = cfg.analyst_config()?;
    let (ts, malformed) = ingest_trajectories(trajectories, &tasks, &acfg.evaluators, &args.out)?;
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed trajectory records");
    }
    let parts = partition(&ts)?;
    let failures = cases(&parts.failures, &tasks, &args.out)?;
    let successes = cases(&parts.successes, &tasks, &args.out)?;
    let (pool, runs) = dispatch_pool(&gateway, &skill, &failures, &successes, cfg.analysts, cfg.workers, &acfg)?;
    write_jsonl(&args.out.join("analysis/runs.jsonl"), &runs)?;
    write_pool_level(&args.out.join("pool/level-0"), &pool)?;
    println!("{} analyst runs, {} patches in {}", runs.len(), pool.len(), args.out.join("pool/level-0").display());
    Ok(())
}

fn consolidate_cmd(args: &RunArgs, pool_dir: &Path, skill: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    let skill = initial_skill(&cfg, skill)?;
    let pool = load_pool(pool_dir)?;
    if pool.is_empty() {
        bail!("{} holds no patches", pool_dir.display());
    }
    let gateway = args.gateway(&cfg)?;
    prepare_output(&args.out)?;
    let mcfg = cfg.merge_config()?;
    let out = &args.out;
    let (evolved, diff) = match cfg.consolidation {
        Consolidation::Parallel => {
            let r = consolidate(&gateway, &skill, &pool, &mcfg)?;
            for (l, level) in r.per_level_patches.iter().enumerate().skip(1) {
                write_pool_level(&out.join(format!("pool/level-{l}")), level)?;
            }
            write_jsonl(&out.join("pool/merges.jsonl"), &r.merges)?;
            write_json(&out.join("pool/final.json"), &r.final_patch)?;
            let report = RoundReport::from_plan(&r.plan);
            write_rounds(out, &report)?;
            println!("{} merge calls over {} levels, {} edits applied", r.merge_calls(), r.plan.depth(), r.applied_edits.len());
            if r.rolled_back {
                log::warn!("the final patch failed validation and was rolled back");
            }
            (r.evolved_skill, r.diff)
        }
        Consolidation::Sequential(b) => {
            let r = consolidate_sequential(&gateway, &skill, &pool, b, &mcfg)?;
            for (k, step) in r.steps.iter().enumerate() {
                write_json(&out.join(format!("pool/sequential/step-{k:04}.json")), step)?;
            }
            println!("{} sequential steps of up to {b} patches", r.rounds());
            (r.evolved_skill, r.diff)
        }
    };
    save_skill(&evolved, &out.join("evolved_skill"))?;
    write_file(&out.join("evolved.diff"), &diff)?;
    println!("evolved skill in {}", out.join("evolved_skill").display());
    Ok(())
}

fn draft_cmd(args: &RunArgs, brief: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    let brief = match brief {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => cfg.domain_brief()?.context("no brief given; pass --brief or set domain_brief in the config")?,
    };
    let gateway = args.gateway(&cfg)?;
    prepare_output(&args.out)?;
    let (skill, calls) = draft_parametric_skill(&gateway, &brief, cfg.draft_profile(), &cfg.draft_prompts()?)?;
    save_skill(&skill, &args.out)?;
    println!("drafted skill in {} ({calls} model calls)", args.out.display());
    Ok(())
}

fn apply_cmd(skill: &Path, patch: &Path, out: &Path, diff_path: Option<&Path>) -> Result<bool> {
    let skill = load_skill(skill).with_context(|| format!("loading skill {}", skill.display()))?;
    let text = fs::read_to_string(patch).with_context(|| format!("reading {}", patch.display()))?;
    let patch = SkillPatch::from_json(&text).with_context(|| format!("parsing {}", patch.display()))?;
    let outcome = apply_patch(&skill, &patch);
    for r in &outcome.conflicts.rejected {
        eprintln!("withheld edit {}: {:?}", r.edit, r.reason);
    }
    for c in &outcome.conflicts.conflicts {
        eprintln!("withheld edits {} and {}: overlapping lines {} of {}", c.edits.0, c.edits.1, c.overlap, c.file);
    }
    if outcome.rolled_back {
        for f in outcome.validation.errors() {
            eprintln!("validation error: {}", f.message);
        }
        eprintln!("patch rolled back; nothing written");
        return Ok(false);
    }
    prepare_output(out)?;
    save_skill(&outcome.skill, out)?;
    match diff_path {
        Some(p) => write_file(p, &outcome.diff)?,
        None => print!("{}", outcome.diff),
    }
    eprintln!("applied {} of {} edits", outcome.applied_edits.len(), patch.edits.len());
    Ok(true)
}

fn validate_cmd(path: &Path) -> Result<bool> {
    let skill = load_skill(path).with_context(|| format!("loading skill {}", path.display()))?;
    let report = validate_skill(&skill);
    for f in &report.findings {
        let level = if f.severity == Severity::Error { "error" } else { "warning" };
        println!("{level}: {}: {}", f.path, f.message);
    }
    println!("{}", if report.ok { "ok" } else { "invalid" });
    Ok(report.ok)
}

fn report_cmd(manifest: Option<&Path>, pool_size: Option<usize>, batch: usize, level_cap: u32, seq: &[usize], json: bool) -> Result<()> {
    let report = match manifest {
        Some(p) => report_rounds(&RunManifest::load(p)?)?,
        None => RoundReport::from_plan(&plan_merge_tree(pool_size.expect("clap requires it"), batch, level_cap, seq)?),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Evolve { run, trajectories } => evolve(&run, trajectories.as_deref()),
        Command::Rollout { run, tasks, skill } => rollout_cmd(&run, tasks, skill.as_deref()).map(|()| true),
        Command::Analyze { run, trajectories, skill } => analyze_cmd(&run, &trajectories, skill.as_deref()).map(|()| true),
        Command::Consolidate { run, pool, skill } => consolidate_cmd(&run, &pool, skill.as_deref()).map(|()| true),
        Command::Draft { run, brief } => draft_cmd(&run, brief.as_deref()).map(|()| true),
        Command::Apply { skill, patch, out, diff } => apply_cmd(&skill, &patch, &out, diff.as_deref()),
        Command::Validate { skill } => validate_cmd(&skill),
        Command::Report { manifest, pool_size, batch, level_cap, sequential_batches, json } => {
            report_cmd(manifest.as_deref(), pool_size, batch, level_cap, &sequential_batches, json).map(|()| true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// The name a value has in config files and the manifest.
fn wire_name<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}
