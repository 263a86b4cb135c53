use std::path::Path;

use crate::skill::SkillDir;
use crate::trajectory::{Outcome, Trajectory};

/// Every skill file with 1-based line numbers, in path order. Binary files
/// are listed by size only.
pub fn render_skill_for_prompt(skill: &SkillDir) -> String {
    let mut out = String::new();
    for (path, bytes) in skill.files() {
        match std::str::from_utf8(&bytes) {
            Ok(text) => {
                out.push_str(&format!("=== {} ===\n", path.as_str()));
                for (i, line) in text.lines().enumerate() {
                    out.push_str(&format!("{:>4} | {line}\n", i + 1));
                }
            }
            Err(_) => out.push_str(&format!("=== {} (binary, {} bytes) ===\n", path.as_str(), bytes.len())),
        }
        out.push('\n');
    }
    out
}

fn clip(text: &str, limit: Option<usize>) -> String {
    match limit {
        Some(l) if text.len() > l => {
            let mut cut = l;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            format!("{}\n[... {} more bytes]", &text[..cut], text.len() - cut)
        }
        _ => text.to_string(),
    }
}

/// One step as shown to analysts (`k` is 1-based).
pub(crate) fn render_step(traj: &Trajectory, k: usize, artifacts: &Path, limit: Option<usize>) -> Option<String> {
    let step = traj.steps.get(k.checked_sub(1)?)?;
    let observation = step
        .observation_text(artifacts)
        .unwrap_or_else(|e| format!("[observation file unreadable: {e}]"));
    let mut out = format!("## Step {k}\n");
    if !step.reasoning.is_empty() {
        out.push_str(&format!("Reasoning:\n{}\n", step.reasoning));
    }
    out.push_str(&format!("Action: {} {}\n", step.action.tool, step.action.arguments));
    if !observation.is_empty() {
        out.push_str(&format!("Observation:\n{}\n", clip(&observation, limit).trim_end()));
    }
    Some(out)
}

/// The whole trajectory as plain text.
pub fn render_trajectory(traj: &Trajectory, query: &str, artifacts: &Path, limit: Option<usize>) -> String {
    let outcome = match traj.outcome {
        Some(Outcome::Success) => "success",
        Some(Outcome::Failure) => "failure",
        None => "not evaluated",
    };
    let mut out = format!(
        "Trajectory: {}\nTask: {}\nOutcome: {outcome}\nTurns: {}\nFinal answer: {}\n\n",
        traj.id(),
        query.trim(),
        traj.turn_count,
        if traj.final_answer.is_empty() { "(none)" } else { &traj.final_answer }
    );
    for k in 1..=traj.steps.len() {
        out.push_str(&render_step(traj, k, artifacts, limit).expect("index in range"));
        out.push('\n');
    }
    out
}
