use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Conflict, ConflictReport, EditOp, RejectReason, Rejection, ResolvedEdit, SkillPatch};
use crate::paths::RelPath;
use crate::skill::markdown;

/// Flags every pair of resolved edits that touch the same lines of the
/// same file. All members of a conflicting pair are withheld; nothing is
/// arbitrated here.
pub fn detect_conflicts(resolved: &[ResolvedEdit]) -> ConflictReport {
    let mut order: Vec<&ResolvedEdit> = resolved.iter().collect();
    order.sort_by(|a, b| {
        (&a.file, a.span.start, a.span.end, a.edit).cmp(&(&b.file, b.span.start, b.span.end, b.edit))
    });

    let mut conflicts = Vec::new();
    let mut active: Vec<&ResolvedEdit> = Vec::new();
    for cur in order {
        // drop spans that can no longer reach anything starting at or after cur
        active.retain(|a| {
            a.file == cur.file
                && if a.span.is_point() {
                    cur.span.start <= a.span.start
                } else {
                    cur.span.start < a.span.end
                }
        });
        for a in &active {
            if let Some(overlap) = a.span.overlap(&cur.span) {
                let pair = (a.edit.min(cur.edit), a.edit.max(cur.edit));
                conflicts.push(Conflict { edits: pair, file: cur.file.clone(), overlap });
            }
        }
        active.push(cur);
    }
    conflicts.sort_by_key(|c| c.edits);
    ConflictReport { conflicts, rejected: Vec::new() }
}

/// Local paths linked from `content`, resolved relative to `from`.
pub(crate) fn linked_paths(content: &str, from: &str) -> Vec<RelPath> {
    let dir = from.rsplit_once('/').map(|(d, _)| d).unwrap_or("");
    markdown::link_targets(content)
        .iter()
        .filter_map(|d| markdown::local_link_path(d))
        .filter_map(|p| {
            let joined = if dir.is_empty() { p } else { format!("{dir}/{p}") };
            RelPath::normalize(&joined).ok()
        })
        .collect()
}

/// Create/link pairs: a `CreateFile` under `references/` and each edit in
/// the same patch whose content links to the created path.
fn pair_graph(patch: &SkillPatch) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut created: BTreeMap<RelPath, Vec<usize>> = BTreeMap::new();
    for (i, e) in patch.edits.iter().enumerate() {
        if let EditOp::CreateFile { file, .. } = e {
            if let Ok(p) = RelPath::normalize(file) {
                if p.top_level() == "references" && p.is_nested() {
                    created.entry(p).or_default().push(i);
                }
            }
        }
    }
    let mut graph: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, e) in patch.edits.iter().enumerate() {
        for target in linked_paths(e.content(), e.file()) {
            for &c in created.get(&target).into_iter().flatten() {
                if c != i {
                    graph.entry(i).or_default().insert(c);
                    graph.entry(c).or_default().insert(i);
                }
            }
        }
    }
    graph
}

/// Extends `report` so that a created reference file and the edits linking
/// to it are kept or dropped together.
pub fn enforce_atomic_pairs(patch: &SkillPatch, report: ConflictReport) -> ConflictReport {
    let graph = pair_graph(patch);
    if graph.is_empty() {
        return report;
    }
    let mut report = report;
    let mut withheld = report.withheld();
    let mut queue: VecDeque<usize> = withheld.iter().copied().collect();
    while let Some(node) = queue.pop_front() {
        for &next in graph.get(&node).into_iter().flatten() {
            if withheld.insert(next) {
                report.rejected.push(Rejection { edit: next, reason: RejectReason::AtomicPair { partner: node } });
                queue.push_back(next);
            }
        }
    }
    report.rejected.sort_by_key(|r| r.edit);
    report
}
