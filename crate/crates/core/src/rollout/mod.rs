//! Stage 1: the task agent in a tool-using loop with the skill preloaded.

mod eval;
mod sandbox;
mod tools;

use std::fs;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

pub use eval::{evaluate, Evaluator, Evaluators, ExactMatch, FileCompare};
pub use sandbox::{copy_tree, run_shell, Sandbox, SandboxError, ShellOutput};
pub use tools::{bash_tool, list_files_tool, read_file_tool, read_text, write_file_tool, Handler, SandboxHost, ToolExecutor};

use crate::gateway::{ChatMessage, Gateway, ModelProfile, ToolSpec};
use crate::react::{extract_final_answer, run_loop};
use crate::skill::{save_skill, SkillDir, SkillError};
use crate::template;
use crate::trajectory::{TaskSpec, Trajectory};

/// Directory inside the sandbox holding a copy of the skill's files.
pub const SKILL_MOUNT: &str = "skill";

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("template has no {{{{{0}}}}} slot")]
    MissingSlot(String),
    #[error("no evaluator registered as {0:?}")]
    UnknownEvaluator(String),
    #[error("input {0:?} does not exist")]
    MissingInput(String),
    #[error("sandbox {0} is not empty")]
    SandboxInUse(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub turn_budget: usize,
    pub profile: ModelProfile,
    pub system_prompt_template: String,
    /// Fills the `{{role}}` slot.
    pub role: String,
    pub tool_timeout: Duration,
}

impl RolloutConfig {
    pub fn new(profile: ModelProfile) -> Self {
        RolloutConfig {
            turn_budget: 100,
            profile,
            system_prompt_template: template::AGENT_SYSTEM.to_string(),
            role: "problem-solving".to_string(),
            tool_timeout: Duration::from_secs(120),
        }
    }
}

/// Name an input gets inside the sandbox: its final path component.
fn staged_name(input: &str) -> String {
    Path::new(input).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| input.to_string())
}

/// Task text shown to the agent.
pub fn describe_task(task: &TaskSpec) -> String {
    let mut out = task.query.trim_end().to_string();
    if !task.input_paths.is_empty() {
        out.push_str("\n\nInput files in your working directory:\n");
        for p in &task.input_paths {
            out.push_str(&format!("- {}\n", staged_name(p)));
        }
    }
    out
}

fn describe_tools(tools: &[ToolSpec]) -> String {
    tools.iter().map(|t| format!("- `{}`: {}", t.name, t.description)).collect::<Vec<_>>().join("\n")
}

/// Fills the agent template. Only the root document's body is inlined;
/// resource files are left for the agent to open.
pub fn build_system_prompt(
    skill: &SkillDir,
    task: &TaskSpec,
    template: &str,
    role: &str,
    tools: &[ToolSpec],
) -> Result<String, RolloutError> {
    if !template::has_slot(template, "skill") {
        return Err(RolloutError::MissingSlot("skill".into()));
    }
    let body = skill.root.body();
    let task_text = describe_task(task);
    let tools_text = describe_tools(tools);
    Ok(template::fill(
        template,
        &[("skill", body.trim_end()), ("task", &task_text), ("tools", &tools_text), ("role", role)],
    ))
}

/// Creates a fresh sandbox at `dir` holding the task inputs (by file name)
/// and the skill under [`SKILL_MOUNT`].
pub fn stage_sandbox(task: &TaskSpec, task_base: &Path, skill: &SkillDir, dir: &Path) -> Result<Sandbox, RolloutError> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(RolloutError::SandboxInUse(dir.display().to_string()));
    }
    let sandbox = Sandbox::new(dir)?;
    for input in &task.input_paths {
        let from = task_base.join(input);
        if !from.exists() {
            return Err(RolloutError::MissingInput(input.clone()));
        }
        copy_tree(&from, &sandbox.root().join(staged_name(input)))?;
    }
    save_skill(skill, &sandbox.root().join(SKILL_MOUNT))?;
    Ok(sandbox)
}

/// Runs the agent on one task inside an already staged sandbox. The
/// returned trajectory is not yet evaluated and has an empty
/// `artifact_dir`.
pub fn rollout(
    gateway: &Gateway,
    task: &TaskSpec,
    skill: &SkillDir,
    cfg: &RolloutConfig,
    executor: &ToolExecutor,
    sandbox: &Sandbox,
) -> Result<Trajectory, RolloutError> {
    let specs = executor.specs();
    let system = build_system_prompt(skill, task, &cfg.system_prompt_template, &cfg.role, &specs)?;
    let messages = vec![ChatMessage::system(system), ChatMessage::user("Start working on the task.")];
    let mut host = executor.host(sandbox);
    let outcome = run_loop(gateway, &cfg.profile, messages, &mut host, cfg.turn_budget.max(1));

    let mut traj = Trajectory::new(task.task_id.clone(), "");
    for step in outcome.steps {
        traj.push_step(step);
    }
    if let Some(text) = &outcome.final_text {
        traj.final_answer = extract_final_answer(text);
    }
    if let Some(e) = outcome.error {
        log::warn!("rollout of {} aborted: {e}", task.task_id);
        traj.aborted = true;
    }
    Ok(traj)
}

/// File-system friendly form of a task id.
pub fn artifact_name(task_id: &str) -> String {
    task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}
