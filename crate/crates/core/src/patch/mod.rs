//! Skill patches: the edit vocabulary, anchor resolution, conflict
//! detection and guarded application.

mod apply;
mod conflict;
pub mod diff;
mod resolve;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::paths::RelPath;
pub use apply::{apply_patch, ApplyOutcome};
pub use conflict::{detect_conflicts, enforce_atomic_pairs};
pub use resolve::resolve_edits;

/// One diff-style edit against a skill file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    /// Insert `content` at the end of the section headed by `anchor`
    /// (before the next heading of the same or a higher level).
    InsertAfter {
        file: String,
        #[serde(rename = "target_section", alias = "anchor")]
        anchor: String,
        content: String,
    },
    /// Replace 1-based inclusive lines `start..=end`.
    ReplaceLines { file: String, start: usize, end: usize, content: String },
    #[serde(rename = "create", alias = "create_file")]
    CreateFile { file: String, content: String },
    #[serde(rename = "append", alias = "append_to_file")]
    AppendToFile { file: String, content: String },
}

impl EditOp {
    pub fn file(&self) -> &str {
        match self {
            EditOp::InsertAfter { file, .. }
            | EditOp::ReplaceLines { file, .. }
            | EditOp::CreateFile { file, .. }
            | EditOp::AppendToFile { file, .. } => file,
        }
    }

    pub fn content(&self) -> &str {
        match self {
            EditOp::InsertAfter { content, .. }
            | EditOp::ReplaceLines { content, .. }
            | EditOp::CreateFile { content, .. }
            | EditOp::AppendToFile { content, .. } => content,
        }
    }

    pub fn op_name(&self) -> &'static str {
        match self {
            EditOp::InsertAfter { .. } => "insert_after",
            EditOp::ReplaceLines { .. } => "replace_lines",
            EditOp::CreateFile { .. } => "create",
            EditOp::AppendToFile { .. } => "append",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    ErrorAnalyst,
    SuccessAnalyst,
    Merge,
}

/// Where a patch came from. `merge_level` is 0 exactly for analyst output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: PatchSource,
    #[serde(default)]
    pub trajectory_ids: Vec<String>,
    #[serde(default)]
    pub merge_level: u32,
    #[serde(default)]
    pub cited_themes: Vec<String>,
}

impl Provenance {
    pub fn analyst(source: PatchSource, trajectory_id: &str) -> Self {
        debug_assert!(source != PatchSource::Merge);
        Provenance {
            source,
            trajectory_ids: vec![trajectory_id.to_string()],
            merge_level: 0,
            cited_themes: Vec::new(),
        }
    }

    pub fn is_consistent(&self) -> bool {
        (self.merge_level == 0) == (self.source != PatchSource::Merge)
    }
}

/// A proposed skill update: edits plus the reasoning and changelog that
/// accompany them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillPatch {
    #[serde(default)]
    pub reasoning: String,
    #[serde(default)]
    pub edits: Vec<EditOp>,
    #[serde(default)]
    pub changelog_entries: Vec<String>,
    pub provenance: Provenance,
}

impl SkillPatch {
    pub fn empty(provenance: Provenance) -> Self {
        SkillPatch { reasoning: String::new(), edits: Vec::new(), changelog_entries: Vec::new(), provenance }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("patch serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Copy keeping only edits whose index is not in `drop`.
    pub fn without_edits(&self, drop: &BTreeSet<usize>) -> SkillPatch {
        let mut out = self.clone();
        out.edits = self
            .edits
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, e)| e.clone())
            .collect();
        out
    }
}

/// Half-open 0-based line interval `[start, end)`. Zero width marks an
/// insertion point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

impl LineSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        LineSpan { start, end }
    }

    pub fn point(at: usize) -> Self {
        LineSpan { start: at, end: at }
    }

    pub fn is_point(&self) -> bool {
        self.start == self.end
    }

    /// Shared region of two spans, if they touch the same lines.
    ///
    /// Two ranges overlap when they share a line. An insertion point
    /// overlaps a range that starts at or before it and ends after it, and
    /// another insertion point at the same position.
    pub fn overlap(&self, other: &LineSpan) -> Option<LineSpan> {
        match (self.is_point(), other.is_point()) {
            (true, true) => (self.start == other.start).then_some(*self),
            (true, false) => (other.start <= self.start && self.start < other.end).then_some(*self),
            (false, true) => other.overlap(self),
            (false, false) => {
                let s = self.start.max(other.start);
                let e = self.end.min(other.end);
                (s < e).then(|| LineSpan::new(s, e))
            }
        }
    }
}

impl fmt::Display for LineSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// An edit located against a concrete file snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedEdit {
    /// Index into the patch's `edits`.
    pub edit: usize,
    pub file: RelPath,
    pub span: LineSpan,
    pub insertion: bool,
    /// Creates `file` rather than editing it.
    #[serde(default)]
    pub creates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum RejectReason {
    NonexistentFile,
    DuplicateCreate,
    UnresolvableAnchor,
    AmbiguousAnchor,
    /// `ReplaceLines` outside the file or with `start > end`.
    InvalidRange,
    /// Path is absolute, escapes the skill, or collides with a directory.
    InvalidPath,
    /// Line-addressed edit on a binary resource.
    NonTextTarget,
    /// Withheld because its create/link partner was withheld.
    AtomicPair { partner: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub edits: (usize, usize),
    pub file: RelPath,
    pub overlap: LineSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub edit: usize,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConflictReport {
    pub conflicts: Vec<Conflict>,
    pub rejected: Vec<Rejection>,
}

impl ConflictReport {
    /// Indices of every edit that will not be applied.
    pub fn withheld(&self) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = self.rejected.iter().map(|r| r.edit).collect();
        for c in &self.conflicts {
            out.insert(c.edits.0);
            out.insert(c.edits.1);
        }
        out
    }

    pub fn is_clean(&self) -> bool {
        self.conflicts.is_empty() && self.rejected.is_empty()
    }

    pub fn merge(mut self, other: ConflictReport) -> ConflictReport {
        self.conflicts.extend(other.conflicts);
        self.rejected.extend(other.rejected);
        self
    }

    pub fn rejection(&self, edit: usize) -> Option<RejectReason> {
        self.rejected.iter().find(|r| r.edit == edit).map(|r| r.reason)
    }
}

/// Runs the three screening passes and returns the combined report.
pub fn screen(patch: &SkillPatch, skill: &crate::skill::SkillDir) -> (Vec<ResolvedEdit>, ConflictReport) {
    let (resolved, partial) = resolve_edits(patch, skill);
    let report = partial.merge(detect_conflicts(&resolved));
    let report = enforce_atomic_pairs(patch, report);
    (resolved, report)
}
