//! Unified diffs between two skill trees.

use std::collections::BTreeSet;

use similar::TextDiff;

use crate::skill::SkillDir;

const CONTEXT: usize = 3;

/// Standard `---`/`+++`/`@@` unified diff over every file that differs,
/// in path order. Added files diff against `/dev/null`.
pub fn unified_diff(before: &SkillDir, after: &SkillDir) -> String {
    let old = before.files();
    let new = after.files();
    let paths: BTreeSet<_> = old.keys().chain(new.keys()).collect();
    let mut out = String::new();
    for path in paths {
        let (a, b) = (old.get(path), new.get(path));
        if a == b {
            continue;
        }
        let text = |bytes: Option<&Vec<u8>>| match bytes {
            None => Some(String::new()),
            Some(b) => String::from_utf8(b.clone()).ok(),
        };
        let old_name = if a.is_some() { format!("a/{path}") } else { "/dev/null".to_string() };
        let new_name = if b.is_some() { format!("b/{path}") } else { "/dev/null".to_string() };
        match (text(a), text(b)) {
            (Some(x), Some(y)) => {
                let diff = TextDiff::from_lines(&x, &y);
                out.push_str(
                    &diff
                        .unified_diff()
                        .context_radius(CONTEXT)
                        .header(&old_name, &new_name)
                        .to_string(),
                );
            }
            _ => out.push_str(&format!("Binary files {old_name} and {new_name} differ\n")),
        }
    }
    out
}
