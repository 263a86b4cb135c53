use super::{ConflictReport, EditOp, LineSpan, RejectReason, Rejection, ResolvedEdit, SkillPatch};
use crate::paths::RelPath;
use crate::skill::{find_section_in_text, markdown, SkillDir};

/// Locates every edit of `patch` against the current content of `skill`.
///
/// Edits that cannot be located are reported in the returned partial
/// report rather than failing the whole patch.
pub fn resolve_edits(patch: &SkillPatch, skill: &SkillDir) -> (Vec<ResolvedEdit>, ConflictReport) {
    let mut resolved = Vec::new();
    let mut report = ConflictReport::default();
    for (idx, edit) in patch.edits.iter().enumerate() {
        match resolve_one(edit, skill) {
            Ok((file, span, creates)) => resolved.push(ResolvedEdit {
                edit: idx,
                file,
                span,
                insertion: span.is_point(),
                creates,
            }),
            Err(reason) => report.rejected.push(Rejection { edit: idx, reason }),
        }
    }
    (resolved, report)
}

fn resolve_one(edit: &EditOp, skill: &SkillDir) -> Result<(RelPath, LineSpan, bool), RejectReason> {
    let file = RelPath::normalize(edit.file()).map_err(|_| RejectReason::InvalidPath)?;

    if let EditOp::CreateFile { .. } = edit {
        if skill.contains(&file) {
            return Err(RejectReason::DuplicateCreate);
        }
        let as_dir = format!("{}/", file.as_str());
        let collides = skill.resources.keys().any(|p| {
            p.as_str().starts_with(&as_dir) || file.as_str().starts_with(&format!("{}/", p.as_str()))
        }) || file.as_str().starts_with("SKILL.md/");
        if collides {
            return Err(RejectReason::InvalidPath);
        }
        return Ok((file, LineSpan::point(0), true));
    }

    // guardrail: edits on files that do not exist are rejected
    if !skill.contains(&file) {
        return Err(RejectReason::NonexistentFile);
    }
    let text = skill.file_text(&file).ok_or(RejectReason::NonTextTarget)?;
    let lines = markdown::line_count(&text);

    let span = match edit {
        EditOp::InsertAfter { anchor, .. } => {
            let found = find_section_in_text(&text, anchor).map_err(|_| RejectReason::UnresolvableAnchor)?;
            match found.as_slice() {
                [] => return Err(RejectReason::UnresolvableAnchor),
                [one] => LineSpan::point(one.extent_end),
                _ => return Err(RejectReason::AmbiguousAnchor),
            }
        }
        EditOp::ReplaceLines { start, end, .. } => {
            if *start < 1 || start > end || *end > lines {
                return Err(RejectReason::InvalidRange);
            }
            LineSpan::new(start - 1, *end)
        }
        EditOp::AppendToFile { .. } => LineSpan::point(lines),
        EditOp::CreateFile { .. } => unreachable!("handled above"),
    };
    Ok((file, span, false))
}
