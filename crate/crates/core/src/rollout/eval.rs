use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::sandbox::Sandbox;
use super::RolloutError;
use crate::trajectory::{GroundTruth, Outcome, TaskSpec, Trajectory};

/// Grades an answer and the files in `workdir` against the ground truth.
/// `task_base` is the directory ground-truth paths are relative to.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, answer: &str, workdir: &Path, truth: &GroundTruth, task_base: &Path) -> bool;
}

/// Trimmed final answer equals the literal ground truth.
pub struct ExactMatch;

impl Evaluator for ExactMatch {
    fn evaluate(&self, answer: &str, _workdir: &Path, truth: &GroundTruth, _task_base: &Path) -> bool {
        match truth {
            GroundTruth::Literal(expected) => answer.trim() == expected.trim(),
            GroundTruth::File { .. } => false,
        }
    }
}

/// The produced file is byte-identical to the expected file.
pub struct FileCompare;

impl Evaluator for FileCompare {
    fn evaluate(&self, _answer: &str, workdir: &Path, truth: &GroundTruth, task_base: &Path) -> bool {
        let GroundTruth::File { path, produced } = truth else {
            return false;
        };
        let produced = match produced {
            Some(p) => p.clone(),
            None => match Path::new(path).file_name() {
                Some(name) => name.to_string_lossy().into_owned(),
                None => return false,
            },
        };
        let Ok(sandbox) = Sandbox::new(workdir) else {
            return false;
        };
        let Ok(produced_path) = sandbox.resolve(&produced) else {
            return false;
        };
        match (fs::read(produced_path), fs::read(task_base.join(path))) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    }
}

/// Evaluators by id. `exact_match` and `file_compare` are built in; other
/// benchmarks register their own.
#[derive(Clone)]
pub struct Evaluators {
    map: BTreeMap<String, Arc<dyn Evaluator>>,
}

impl std::fmt::Debug for Evaluators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.map.keys()).finish()
    }
}

impl Default for Evaluators {
    fn default() -> Self {
        let mut e = Evaluators { map: BTreeMap::new() };
        e.register("exact_match", Arc::new(ExactMatch));
        e.register("file_compare", Arc::new(FileCompare));
        e
    }
}

impl Evaluators {
    pub fn register(&mut self, id: &str, evaluator: Arc<dyn Evaluator>) {
        self.map.insert(id.to_string(), evaluator);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn Evaluator>, RolloutError> {
        self.map.get(id).ok_or_else(|| RolloutError::UnknownEvaluator(id.to_string()))
    }

    /// Grades without touching any trajectory.
    pub fn grade(&self, task: &TaskSpec, answer: &str, workdir: &Path, task_base: &Path) -> Result<Outcome, RolloutError> {
        let ev = self.get(&task.evaluator_id)?;
        Ok(Outcome::from(ev.evaluate(answer, workdir, &task.ground_truth, task_base)))
    }
}

/// Grades `trajectory` and stores the outcome on it. `workdir` is the
/// trajectory's artifact directory.
pub fn evaluate(
    evaluators: &Evaluators,
    trajectory: &mut Trajectory,
    task: &TaskSpec,
    workdir: &Path,
    task_base: &Path,
) -> Result<Outcome, RolloutError> {
    let outcome = evaluators.grade(task, &trajectory.final_answer, workdir, task_base)?;
    trajectory.outcome = Some(outcome);
    Ok(outcome)
}
