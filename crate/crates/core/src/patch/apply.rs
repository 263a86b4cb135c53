use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{diff::unified_diff, screen, ConflictReport, EditOp, ResolvedEdit, SkillPatch};
use crate::paths::RelPath;
use crate::skill::{validate_skill, Finding, Severity, SkillDir, ValidationReport, ROOT_DOC};

/// Result of [`apply_patch`].
#[derive(Debug, Clone)]
pub struct ApplyOutcome {
    /// The updated skill, or the input skill when the update was rolled back.
    pub skill: SkillDir,
    pub diff: String,
    pub conflicts: ConflictReport,
    pub validation: ValidationReport,
    /// Indices of edits that made it into `skill`.
    pub applied_edits: Vec<usize>,
    pub rolled_back: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApplySummary {
    pub applied_edits: Vec<usize>,
    pub rolled_back: bool,
    pub conflicts: ConflictReport,
    pub validation: ValidationReport,
}

impl ApplyOutcome {
    pub fn summary(&self) -> ApplySummary {
        ApplySummary {
            applied_edits: self.applied_edits.clone(),
            rolled_back: self.rolled_back,
            conflicts: self.conflicts.clone(),
            validation: self.validation.clone(),
        }
    }
}

/// Applies the surviving edits of `patch` to `skill`.
///
/// Edits are screened (resolution, conflicts, create/link pairs), applied
/// bottom-up per file, and the result is validated. Any validation error
/// rolls the whole patch back and the input skill is returned unchanged.
pub fn apply_patch(skill: &SkillDir, patch: &SkillPatch) -> ApplyOutcome {
    let (resolved, conflicts) = screen(patch, skill);
    let withheld = conflicts.withheld();
    let survivors: Vec<&ResolvedEdit> = resolved.iter().filter(|r| !withheld.contains(&r.edit)).collect();

    if survivors.is_empty() {
        return ApplyOutcome {
            skill: skill.clone(),
            diff: String::new(),
            conflicts,
            validation: validate_skill(skill),
            applied_edits: Vec::new(),
            rolled_back: false,
        };
    }

    let mut files = skill.files();
    let mut by_file: BTreeMap<&RelPath, Vec<&ResolvedEdit>> = BTreeMap::new();
    for r in &survivors {
        by_file.entry(&r.file).or_default().push(r);
    }
    for (path, mut edits) in by_file {
        if edits.iter().any(|r| r.creates) {
            // screening guarantees a created path has exactly one surviving edit
            let content = patch.edits[edits[0].edit].content();
            files.insert(path.clone(), normalized(content).into_bytes());
            continue;
        }
        let text = String::from_utf8(files[path].clone()).expect("resolution checked utf-8");
        let mut lines: Vec<String> = text.split_inclusive('\n').map(str::to_string).collect();
        edits.sort_by(|a, b| b.span.start.cmp(&a.span.start));
        for r in edits {
            splice(&mut lines, r, &patch.edits[r.edit]);
        }
        files.insert(path.clone(), lines.concat().into_bytes());
    }

    let mut applied_edits: Vec<usize> = survivors.iter().map(|r| r.edit).collect();
    applied_edits.sort_unstable();

    let rebuilt = match SkillDir::from_files(files) {
        Ok(s) => s,
        Err(e) => {
            let validation = ValidationReport {
                ok: false,
                findings: vec![Finding {
                    severity: Severity::Error,
                    path: ROOT_DOC.to_string(),
                    message: format!("patched skill no longer parses: {e}"),
                }],
            };
            return rollback(skill, conflicts, validation);
        }
    };
    let validation = validate_skill(&rebuilt);
    if !validation.ok {
        return rollback(skill, conflicts, validation);
    }
    let diff = unified_diff(skill, &rebuilt);
    ApplyOutcome { skill: rebuilt, diff, conflicts, validation, applied_edits, rolled_back: false }
}

fn rollback(skill: &SkillDir, conflicts: ConflictReport, validation: ValidationReport) -> ApplyOutcome {
    ApplyOutcome {
        skill: skill.clone(),
        diff: String::new(),
        conflicts,
        validation,
        applied_edits: Vec::new(),
        rolled_back: true,
    }
}

/// Content with a guaranteed trailing newline (empty stays empty).
fn normalized(content: &str) -> String {
    if content.is_empty() || content.ends_with('\n') {
        content.to_string()
    } else {
        format!("{content}\n")
    }
}

fn splice(lines: &mut Vec<String>, r: &ResolvedEdit, edit: &EditOp) {
    let mut block = normalized(edit.content());
    let (start, end) = (r.span.start, r.span.end);
    if r.insertion {
        if block.is_empty() {
            return;
        }
        // keep blank lines between inserted text and its neighbours
        let prev_is_text = matches!(edit, EditOp::InsertAfter { .. }) && start > 0 && lines.get(start - 1).is_some_and(|l| !l.trim().is_empty());
        if prev_is_text && !block.lines().next().is_some_and(|l| l.trim().is_empty()) {
            block.insert(0, '\n');
        }
        let next_is_text = lines.get(start).map(|l| !l.trim().is_empty()).unwrap_or(false);
        let block_ends_blank = block.lines().last().map_or(true, |l| l.trim().is_empty());
        if next_is_text && !block_ends_blank {
            block.push('\n');
        }
        if start > 0 && start == lines.len() {
            let last = &mut lines[start - 1];
            if !last.ends_with('\n') {
                last.push('\n');
            }
        }
    }
    let new_lines: Vec<String> = block.split_inclusive('\n').map(str::to_string).collect();
    lines.splice(start..end, new_lines);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{PatchSource, Provenance};

    const DOC: &str = "---\nname: demo\ndescription: d\n---\n# A\n\ntext\n\n# B\n\nmore\n";

    fn skill() -> SkillDir {
        let mut files = BTreeMap::new();
        files.insert(RelPath::new("SKILL.md").unwrap(), DOC.as_bytes().to_vec());
        SkillDir::from_files(files).unwrap()
    }

    fn patch(edits: Vec<EditOp>) -> SkillPatch {
        SkillPatch {
            reasoning: String::new(),
            edits,
            changelog_entries: vec![],
            provenance: Provenance::analyst(PatchSource::ErrorAnalyst, "t"),
        }
    }

    fn root(s: &SkillDir) -> String {
        s.root.render()
    }

    #[test]
    fn empty_patch_is_identity() {
        let out = apply_patch(&skill(), &patch(vec![]));
        assert_eq!(out.skill, skill());
        assert_eq!(out.diff, "");
        assert!(!out.rolled_back);
    }

    #[test]
    fn insert_after_lands_before_next_heading_with_separator() {
        let out = apply_patch(
            &skill(),
            &patch(vec![EditOp::InsertAfter { file: "SKILL.md".into(), anchor: "# A".into(), content: "## A.1\n\nnew".into() }]),
        );
        assert_eq!(root(&out.skill), "---\nname: demo\ndescription: d\n---\n# A\n\ntext\n\n## A.1\n\nnew\n\n# B\n\nmore\n");
        assert_eq!(out.applied_edits, vec![0]);
        assert!(out.diff.contains("+## A.1\n"));
    }

    #[test]
    fn bottom_up_keeps_original_line_numbers_valid() {
        let out = apply_patch(
            &skill(),
            &patch(vec![
                EditOp::ReplaceLines { file: "SKILL.md".into(), start: 7, end: 7, content: "TEXT".into() },
                EditOp::ReplaceLines { file: "SKILL.md".into(), start: 11, end: 11, content: "MORE\nEVEN MORE\n".into() },
                EditOp::AppendToFile { file: "SKILL.md".into(), content: "tail".into() },
            ]),
        );
        assert_eq!(
            root(&out.skill),
            "---\nname: demo\ndescription: d\n---\n# A\n\nTEXT\n\n# B\n\nMORE\nEVEN MORE\ntail\n"
        );
    }

    #[test]
    fn broken_link_rolls_back() {
        let p = patch(vec![EditOp::InsertAfter {
            file: "SKILL.md".into(),
            anchor: "# B".into(),
            content: "See [x](references/x.md).".into(),
        }]);
        let out = apply_patch(&skill(), &p);
        // oracle: validate the hand-applied document
        let hand = format!("{DOC}See [x](references/x.md).\n");
        let mut files = BTreeMap::new();
        files.insert(RelPath::new("SKILL.md").unwrap(), hand.into_bytes());
        let expected = validate_skill(&SkillDir::from_files(files).unwrap());
        assert!(!expected.ok);
        assert!(out.rolled_back);
        assert_eq!(out.skill, skill());
        assert_eq!(out.validation, expected);
        assert_eq!(out.diff, "");
        assert!(out.applied_edits.is_empty());
    }

    #[test]
    fn create_with_link_applies_both() {
        let p = patch(vec![
            EditOp::CreateFile { file: "references/x.md".into(), content: "# X".into() },
            EditOp::InsertAfter { file: "SKILL.md".into(), anchor: "# B".into(), content: "See [x](references/x.md).".into() },
        ]);
        let out = apply_patch(&skill(), &p);
        assert!(!out.rolled_back, "{:?}", out.validation);
        assert_eq!(out.skill.file_text(&RelPath::new("references/x.md").unwrap()).unwrap(), "# X\n");
        assert!(out.diff.contains("+++ b/references/x.md"));
    }

    #[test]
    fn breaking_frontmatter_rolls_back() {
        let p = patch(vec![EditOp::ReplaceLines { file: "SKILL.md".into(), start: 4, end: 4, content: "oops".into() }]);
        let out = apply_patch(&skill(), &p);
        assert!(out.rolled_back);
        assert!(out.validation.findings[0].message.contains("no longer parses"));
    }

    #[test]
    fn appends_to_file_without_trailing_newline() {
        let mut files = BTreeMap::new();
        files.insert(RelPath::new("SKILL.md").unwrap(), DOC.as_bytes().to_vec());
        files.insert(RelPath::new("references/r.md").unwrap(), b"line".to_vec());
        let s = SkillDir::from_files(files).unwrap();
        let out = apply_patch(&s, &patch(vec![EditOp::AppendToFile { file: "references/r.md".into(), content: "next".into() }]));
        assert_eq!(out.skill.file_text(&RelPath::new("references/r.md").unwrap()).unwrap(), "line\nnext\n");
    }

    #[test]
    fn application_is_deterministic() {
        let p = patch(vec![
            EditOp::InsertAfter { file: "SKILL.md".into(), anchor: "# A".into(), content: "x".into() },
            EditOp::AppendToFile { file: "SKILL.md".into(), content: "y".into() },
        ]);
        let a = apply_patch(&skill(), &p);
        let b = apply_patch(&skill(), &p);
        assert_eq!(a.skill.files(), b.skill.files());
        assert_eq!(a.diff, b.diff);
    }
}
