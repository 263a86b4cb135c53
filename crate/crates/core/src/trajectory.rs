//! Tasks, trajectories and the JSONL trajectory store.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Observations longer than this are written next to the artifacts and
/// referenced from the record.
pub const DEFAULT_INLINE_LIMIT: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("trajectory {0} has no outcome")]
    UnevaluatedTrajectory(String),
    #[error("success rate of an empty set")]
    EmptySet,
    #[error("every one of {0} records in {1} is malformed")]
    AllMalformed(usize, PathBuf),
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("evolve and test sets share task ids: {0:?}")]
    Overlap(Vec<String>),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    /// Expected final answer text.
    Literal(String),
    /// Expected output file; `produced` names the file the agent must write
    /// (relative to its sandbox), defaulting to the expected file's name.
    File {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        produced: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub query: String,
    #[serde(default)]
    pub input_paths: Vec<String>,
    pub ground_truth: GroundTruth,
    #[serde(default = "default_evaluator")]
    pub evaluator_id: String,
}

fn default_evaluator() -> String {
    "exact_match".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Evolve,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub role: TaskRole,
    pub tasks: Vec<TaskSpec>,
    /// Directory that relative input and ground-truth paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TaskSet {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut set: TaskSet = serde_json::from_str(&text)
            .map_err(|e| StoreError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        set.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = BTreeSet::new();
        for t in &set.tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(StoreError::DuplicateTask(t.task_id.clone()));
            }
        }
        Ok(set)
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }
}

/// Fails with the shared ids when the two sets are not disjoint.
pub fn check_disjoint(evolve: &TaskSet, test: &TaskSet) -> Result<(), StoreError> {
    let ids: BTreeSet<&str> = evolve.tasks.iter().map(|t| t.task_id.as_str()).collect();
    let shared: Vec<String> = test
        .tasks
        .iter()
        .filter(|t| ids.contains(t.task_id.as_str()))
        .map(|t| t.task_id.clone())
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(StoreError::Overlap(shared))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Outcome {
    Failure,
    Success,
}

impl From<Outcome> for u8 {
    fn from(o: Outcome) -> u8 {
        match o {
            Outcome::Failure => 0,
            Outcome::Success => 1,
        }
    }
}

impl TryFrom<u8> for Outcome {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Outcome::Failure),
            1 => Ok(Outcome::Success),
            other => Err(format!("outcome must be 0 or 1, got {other}")),
        }
    }
}

impl From<bool> for Outcome {
    fn from(ok: bool) -> Self {
        if ok {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub reasoning: String,
    pub action: ToolCall,
    #[serde(default)]
    pub observation: String,
    /// Set when the observation was offloaded; path relative to the
    /// trajectory's artifact directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_ref: Option<String>,
}

impl Step {
    pub fn observation_text(&self, artifact_dir: &Path) -> std::io::Result<String> {
        match &self.observation_ref {
            Some(rel) => fs::read_to_string(artifact_dir.join(rel)),
            None => Ok(self.observation.clone()),
        }
    }
}

/// One rollout of the agent on one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub rollout: u32,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub final_answer: String,
    #[serde(default)]
    pub outcome: Option<Outcome>,
    /// Sandbox/artifact directory; relative paths are resolved against the
    /// directory holding the trajectory file.
    #[serde(default)]
    pub artifact_dir: String,
    pub turn_count: usize,
    /// The rollout stopped on a model-endpoint failure.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted: bool,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>, artifact_dir: impl Into<String>) -> Self {
        Trajectory {
            task_id: task_id.into(),
            rollout: 0,
            steps: Vec::new(),
            final_answer: String::new(),
            outcome: None,
            artifact_dir: artifact_dir.into(),
            turn_count: 0,
            aborted: false,
        }
    }

    /// Stable identifier: the task id, suffixed with the rollout index when
    /// a task has more than one rollout.
    pub fn id(&self) -> String {
        if self.rollout == 0 {
            self.task_id.clone()
        } else {
            format!("{}@{}", self.task_id, self.rollout)
        }
    }

    pub fn push_step(&mut self, step: Step) {
        self.steps.push(step);
        self.turn_count = self.steps.len();
    }

    pub fn artifact_path(&self, base: &Path) -> PathBuf {
        base.join(&self.artifact_dir)
    }

    /// Moves observations longer than `limit` bytes into files under
    /// `artifact_dir/observations/`.
    pub fn offload_observations(&mut self, artifact_dir: &Path, limit: usize) -> std::io::Result<()> {
        for (k, step) in self.steps.iter_mut().enumerate() {
            if step.observation_ref.is_none() && step.observation.len() > limit {
                let rel = format!("observations/step-{k:04}.txt");
                let target = artifact_dir.join(&rel);
                fs::create_dir_all(target.parent().expect("has parent"))?;
                fs::write(&target, &step.observation)?;
                step.observation.clear();
                step.observation_ref = Some(rel);
            }
        }
        Ok(())
    }
}

pub struct Partition<'a> {
    pub failures: Vec<&'a Trajectory>,
    pub successes: Vec<&'a Trajectory>,
}

/// Splits trajectories by outcome, preserving order within each side.
pub fn partition(trajectories: &[Trajectory]) -> Result<Partition<'_>, StoreError> {
    let mut failures = Vec::new();
    let mut successes = Vec::new();
    for t in trajectories {
        match t.outcome {
            Some(Outcome::Failure) => failures.push(t),
            Some(Outcome::Success) => successes.push(t),
            None => return Err(StoreError::UnevaluatedTrajectory(t.id())),
        }
    }
    Ok(Partition { failures, successes })
}

/// Fraction of trajectories whose outcome is a success.
pub fn success_rate(trajectories: &[Trajectory]) -> Result<f64, StoreError> {
    if trajectories.is_empty() {
        return Err(StoreError::EmptySet);
    }
    let mut wins = 0usize;
    for t in trajectories {
        match t.outcome {
            Some(Outcome::Success) => wins += 1,
            Some(Outcome::Failure) => {}
            None => return Err(StoreError::UnevaluatedTrajectory(t.id())),
        }
    }
    Ok(wins as f64 / trajectories.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub trajectories: Vec<Trajectory>,
    pub malformed: Vec<MalformedLine>,
}

/// Reads a JSONL trajectory file. Malformed lines are collected, not fatal,
/// unless every non-blank line is malformed.
pub fn ingest(path: &Path) -> Result<IngestReport, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut report = IngestReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Trajectory>(&line) {
            Ok(t) => report.trajectories.push(t),
            Err(e) => report.malformed.push(MalformedLine { line: i + 1, message: e.to_string() }),
        }
    }
    if report.trajectories.is_empty() && !report.malformed.is_empty() {
        return Err(StoreError::AllMalformed(report.malformed.len(), path.to_path_buf()));
    }
    Ok(report)
}

/// Append-only JSONL writer. One writer per file.
pub struct TrajectoryWriter {
    path: PathBuf,
    file: fs::File,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(TrajectoryWriter { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, t: &Trajectory) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(t).expect("trajectory serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))
    }
}

/// Writes all trajectories to a fresh file.
pub fn save_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<(), StoreError> {
    if path.exists() {
        fs::remove_file(path).map_err(io_err(path))?;
    }
    let mut w = TrajectoryWriter::create(path)?;
    for t in trajectories {
        w.append(t)?;
    }
    Ok(())
}
