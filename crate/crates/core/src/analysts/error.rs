use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{json, Value};

use super::render::render_step;
use super::{extract_json, render_skill_for_prompt, render_trajectory, AnalystConfig, AnalystError, AnalystKind, AnalystRun, AnalystVerdict, Case, ExclusionReason, MemoryItem, PatchBody, VerdictKind};
use crate::gateway::{ChatMessage, Gateway, ToolSpec};
use crate::patch::{PatchSource, Provenance, SkillPatch};
use crate::react::{run_loop, ToolHost};
use crate::rollout::{copy_tree, describe_task, Sandbox};
use crate::skill::SkillDir;
use crate::template;
use crate::trajectory::{GroundTruth, Outcome};

/// Most memory items an error analysis may contribute.
pub const MAX_ERROR_MEMORY_ITEMS: usize = 3;

#[derive(Deserialize)]
struct ErrorOutput {
    #[serde(default)]
    failure_cause_items: Vec<Value>,
    #[serde(default)]
    memory_items: Vec<MemoryItem>,
    #[serde(default)]
    themes: Vec<String>,
    patch: PatchBody,
}

fn cause_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        Value::Object(m) => {
            let main = ["cause", "description", "title"]
                .iter()
                .find_map(|k| m.get(*k).and_then(Value::as_str))
                .unwrap_or("")
                .trim()
                .to_string();
            match m.get("evidence").and_then(Value::as_str) {
                Some(ev) if !main.is_empty() => format!("{main} (evidence: {})", ev.trim()),
                _ => main,
            }
        }
        _ => String::new(),
    }
}

fn tool(name: &str, description: &str, properties: Value, required: &[&str]) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        description: description.into(),
        parameters: json!({ "type": "object", "properties": properties, "required": required }),
    }
}

/// Tool host of the error analyst. Everything the analyst may read is
/// presented under four top-level names: `artifacts/`, `inputs/`,
/// `ground_truth/` and `candidate/`.
struct Workbench<'a> {
    case: &'a Case<'a>,
    cfg: &'a AnalystConfig,
    candidate: Sandbox,
    candidate_answer: String,
    /// The latest `evaluate_fix` passed and nothing was written since.
    verified: bool,
}

impl<'a> Workbench<'a> {
    fn new(case: &'a Case<'a>, cfg: &'a AnalystConfig, scratch: &Path) -> std::io::Result<Self> {
        if case.artifacts.is_dir() {
            copy_tree(&case.artifacts, scratch)?;
        }
        Ok(Workbench {
            case,
            cfg,
            candidate: Sandbox::new(scratch)?,
            candidate_answer: case.trajectory.final_answer.clone(),
            verified: false,
        })
    }

    fn input_names(&self) -> Vec<(String, PathBuf)> {
        self.case
            .task
            .input_paths
            .iter()
            .map(|p| {
                let name = Path::new(p).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.clone());
                (name, self.case.task_base.join(p))
            })
            .collect()
    }

    fn read_area(root: &Path, rest: &str, shown: &str, args: &Value) -> Result<String, String> {
        let sb = Sandbox::new(root).map_err(|e| e.to_string())?;
        let path = sb.resolve(rest).map_err(|e| e.to_string())?;
        if path.is_dir() {
            let mut names = Vec::new();
            for entry in walkdir::WalkDir::new(&path).min_depth(1).sort_by_file_name() {
                let entry = entry.map_err(|e| e.to_string())?;
                if entry.file_type().is_file() {
                    names.push(format!("{}/{}", shown.trim_end_matches('/'), sb.display(entry.path())));
                }
            }
            return Ok(names.join("\n"));
        }
        read_lines(&path, shown, args)
    }

    fn read_file(&self, args: &Value) -> Result<String, String> {
        let raw = args.get("path").and_then(Value::as_str).ok_or("missing string argument `path`")?.trim();
        if raw.starts_with('/') {
            return Err(format!("{raw} is absolute; paths start with artifacts/, inputs/, ground_truth/ or candidate/"));
        }
        let raw = raw.trim_start_matches("./");
        let (area, rest) = raw.split_once('/').unwrap_or((raw, ""));
        match area {
            "" | "." => Ok("artifacts/\ninputs/\nground_truth/\ncandidate/".to_string()),
            "artifacts" => {
                if !self.case.artifacts.is_dir() {
                    return Err("the trajectory has no artifact directory".into());
                }
                Self::read_area(&self.case.artifacts, rest, "artifacts", args)
            }
            "candidate" => Self::read_area(self.candidate.root(), rest, "candidate", args),
            "inputs" => {
                let inputs = self.input_names();
                if rest.is_empty() {
                    return Ok(inputs.iter().map(|(n, _)| format!("inputs/{n}")).collect::<Vec<_>>().join("\n"));
                }
                let (name, inner) = rest.split_once('/').unwrap_or((rest, ""));
                let (_, path) = inputs.iter().find(|(n, _)| n == name).ok_or_else(|| format!("no input named {name}"))?;
                if path.is_dir() {
                    Self::read_area(path, inner, &format!("inputs/{name}"), args)
                } else if inner.is_empty() {
                    read_lines(path, raw, args)
                } else {
                    Err(format!("inputs/{name} is a file"))
                }
            }
            "ground_truth" => match &self.case.task.ground_truth {
                GroundTruth::Literal(answer) => match rest {
                    "" => Ok("ground_truth/answer.txt".into()),
                    "answer.txt" => Ok(answer.clone()),
                    _ => Err(format!("no such file {raw}")),
                },
                GroundTruth::File { path, .. } => {
                    let name = Path::new(path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    if rest.is_empty() {
                        Ok(format!("ground_truth/{name}"))
                    } else if rest == name {
                        read_lines(&self.case.task_base.join(path), raw, args)
                    } else {
                        Err(format!("no such file {raw}"))
                    }
                }
            },
            other => Err(format!("unknown area `{other}/`; paths start with artifacts/, inputs/, ground_truth/ or candidate/")),
        }
    }

    fn write_fix(&mut self, args: &Value) -> Result<String, String> {
        let mut done = Vec::new();
        if let Some(answer) = args.get("answer").and_then(Value::as_str) {
            self.candidate_answer = answer.to_string();
            done.push("set the candidate answer".to_string());
        }
        if let Some(raw) = args.get("path").and_then(Value::as_str) {
            let content = args.get("content").and_then(Value::as_str).ok_or("`path` needs `content`")?;
            let rel = raw.trim().trim_start_matches("candidate/").trim_start_matches("artifacts/");
            let path = self.candidate.resolve(rel).map_err(|e| e.to_string())?;
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            fs::write(&path, content).map_err(|e| e.to_string())?;
            done.push(format!("wrote {} bytes to candidate/{}", content.len(), self.candidate.display(&path)));
        }
        if done.is_empty() {
            return Err("give `answer`, or `path` and `content`".into());
        }
        self.verified = false;
        Ok(done.join("; "))
    }

    fn evaluate_fix(&mut self) -> Result<String, String> {
        let outcome = self
            .cfg
            .evaluators
            .grade(self.case.task, &self.candidate_answer, self.candidate.root(), self.case.task_base)
            .map_err(|e| e.to_string())?;
        self.verified = outcome == Outcome::Success;
        Ok(if self.verified {
            "PASS: the candidate matches the ground truth.".to_string()
        } else {
            "FAIL: the candidate does not match the ground truth.".to_string()
        })
    }
}

fn read_lines(path: &Path, shown: &str, args: &Value) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {shown}: {e}"))?;
    let text = String::from_utf8(bytes).map_err(|e| format!("{shown} is binary ({} bytes)", e.as_bytes().len()))?;
    let offset = args.get("offset").and_then(Value::as_u64).unwrap_or(1).max(1) as usize;
    let limit = args.get("limit").and_then(Value::as_u64).map(|l| l as usize).unwrap_or(usize::MAX);
    if offset == 1 && limit == usize::MAX {
        return Ok(text);
    }
    Ok(text.split_inclusive('\n').skip(offset - 1).take(limit).collect())
}

impl ToolHost for Workbench<'_> {
    fn specs(&self) -> Vec<ToolSpec> {
        vec![
            tool("read_trace", "Show the failed trajectory, or one 1-based `step` of it.", json!({ "step": { "type": "integer" } }), &[]),
            tool(
                "read_file",
                "Read a file or list a directory under artifacts/, inputs/, ground_truth/ or candidate/.",
                json!({ "path": { "type": "string" }, "offset": { "type": "integer" }, "limit": { "type": "integer" } }),
                &["path"],
            ),
            tool(
                "write_candidate_fix",
                "Write `content` to `path` in the scratch copy of the artifacts, and/or set `answer` as the candidate final answer.",
                json!({ "path": { "type": "string" }, "content": { "type": "string" }, "answer": { "type": "string" } }),
                &[],
            ),
            tool("evaluate_fix", "Grade the candidate against the ground truth with the task's evaluator.", json!({}), &[]),
        ]
    }

    fn invoke(&mut self, name: &str, arguments: &Value) -> String {
        let result = match name {
            "read_trace" => match arguments.get("step").and_then(Value::as_u64) {
                Some(k) => render_step(self.case.trajectory, k as usize, &self.case.artifacts, self.cfg.observation_limit)
                    .ok_or_else(|| format!("no step {k}; the trajectory has {} steps", self.case.trajectory.steps.len())),
                None => Ok(render_trajectory(self.case.trajectory, &self.case.task.query, &self.case.artifacts, self.cfg.observation_limit)),
            },
            "read_file" => self.read_file(arguments),
            "write_candidate_fix" => self.write_fix(arguments),
            "evaluate_fix" => self.evaluate_fix(),
            other => Err(format!("unknown tool `{other}`")),
        };
        result.unwrap_or_else(|e| format!("error: {e}"))
    }
}

/// Agentic analysis of a failed trajectory. A patch is proposed only when
/// the loop ends with a passing `evaluate_fix` (and no edits to the
/// candidate since) and a reply naming at least one failure cause.
pub fn analyze_error(gateway: &Gateway, skill_frozen: &SkillDir, case: &Case<'_>, cfg: &AnalystConfig) -> Result<AnalystRun, AnalystError> {
    let traj = case.trajectory;
    let id = traj.id();
    if traj.outcome != Some(Outcome::Failure) {
        return Err(AnalystError::WrongOutcome { id, expected: "failure", found: traj.outcome.map(u8::from) });
    }
    let excluded = |reason, turns, note: String| Ok(AnalystRun::excluded(&id, AnalystKind::Error, reason, turns, note));

    let scratch = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return excluded(ExclusionReason::MalformedOutput, 0, format!("no scratch directory: {e}")),
    };
    let mut bench = match Workbench::new(case, cfg, scratch.path()) {
        Ok(b) => b,
        Err(e) => return excluded(ExclusionReason::MalformedOutput, 0, format!("cannot copy artifacts: {e}")),
    };
    let system = template::fill(
        &cfg.error_template,
        &[("skill", &render_skill_for_prompt(skill_frozen)), ("task", &describe_task(case.task)), ("role", &cfg.role)],
    );
    let user = format!(
        "The agent failed trajectory {id} after {} steps. Its final answer was: {}\n\nInvestigate with the tools, validate a fix, then reply with the JSON object.",
        traj.turn_count,
        if traj.final_answer.is_empty() { "(none)" } else { &traj.final_answer },
    );
    let outcome = run_loop(gateway, &cfg.error_profile, vec![ChatMessage::system(system), ChatMessage::user(user)], &mut bench, cfg.error_budget.max(1));
    let turns = outcome.turns();

    if let Some(e) = outcome.error {
        log::warn!("error analyst for {id}: {e}");
        return excluded(ExclusionReason::MalformedOutput, turns, format!("model call failed: {e}"));
    }
    let Some(text) = outcome.final_text else {
        return excluded(ExclusionReason::BudgetExhausted, turns, format!("no conclusion within {} turns", cfg.error_budget));
    };
    if !bench.verified {
        return excluded(ExclusionReason::NoVerifiedCause, turns, "finished without a passing evaluate_fix".into());
    }
    let output = match extract_json(&text).map(serde_json::from_value::<ErrorOutput>) {
        Some(Ok(o)) => o,
        Some(Err(e)) => return excluded(ExclusionReason::MalformedOutput, turns, format!("reply does not match the output shape: {e}")),
        None => return excluded(ExclusionReason::MalformedOutput, turns, "reply holds no JSON object".into()),
    };
    let causes: Vec<String> = output.failure_cause_items.iter().map(cause_text).filter(|c| !c.is_empty()).collect();
    if causes.is_empty() {
        return excluded(ExclusionReason::NoVerifiedCause, turns, "verified fix but no failure cause items".into());
    }
    let mut provenance = Provenance::analyst(PatchSource::ErrorAnalyst, &id);
    provenance.cited_themes = output.themes;
    let mut memory_items: Vec<String> = output.memory_items.into_iter().map(MemoryItem::into_text).collect();
    memory_items.truncate(MAX_ERROR_MEMORY_ITEMS);
    Ok(AnalystRun {
        trajectory_id: id,
        analyst: AnalystKind::Error,
        verdict: AnalystVerdict { kind: VerdictKind::PatchProposed, exclusion_reason: None, memory_items },
        patch: Some(SkillPatch {
            reasoning: output.patch.reasoning,
            edits: output.patch.edits,
            changelog_entries: output.patch.changelog_entries,
            provenance,
        }),
        turns_used: turns,
        failure_causes: causes,
        note: None,
    })
}
