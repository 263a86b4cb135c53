use serde::{Deserialize, Serialize};

use super::{markdown, SkillDir, ROOT_DOC};
use crate::paths::RelPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn from_findings(findings: Vec<Finding>) -> Self {
        let ok = findings.iter().all(|f| f.severity != Severity::Error);
        ValidationReport { ok, findings }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }
}

/// Format checker run on every skill the pipeline produces.
///
/// Errors: missing frontmatter or required fields, heading level jumps of
/// more than one, intra-skill links that resolve to nothing. Warnings:
/// sections whose extent holds nothing but the heading.
pub fn validate_skill(skill: &SkillDir) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |severity, message: String| {
        findings.push(Finding { severity, path: ROOT_DOC.to_string(), message })
    };
    let doc = &skill.root;

    if !doc.has_frontmatter() {
        push(Severity::Error, "missing frontmatter".into());
    } else {
        for field in ["name", "description"] {
            match doc.frontmatter.get(field) {
                None => push(Severity::Error, format!("frontmatter field `{field}` missing")),
                Some(v) if v.trim().is_empty() => {
                    push(Severity::Error, format!("frontmatter field `{field}` is empty"))
                }
                Some(_) => {}
            }
        }
    }

    let offset = doc.body_line_offset();
    let body = doc.body();
    let heads = markdown::headings(&body);
    for pair in heads.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.level > prev.level + 1 {
            push(
                Severity::Error,
                format!(
                    "heading level jump from h{} to h{} at line {} ({})",
                    prev.level,
                    next.level,
                    offset + next.line + 1,
                    next.text
                ),
            );
        }
    }

    for dest in markdown::link_targets(&body) {
        let Some(local) = markdown::local_link_path(&dest) else { continue };
        match RelPath::normalize(&local) {
            Ok(path) if resolves(skill, &path) => {}
            Ok(_) => push(Severity::Error, format!("unresolved link: {local}")),
            Err(_) => push(Severity::Error, format!("link escapes the skill directory: {local}")),
        }
    }

    let lines: Vec<&str> = body.split_inclusive('\n').collect();
    for (i, h) in heads.iter().enumerate() {
        let end = heads[i + 1..]
            .iter()
            .find(|n| n.level <= h.level)
            .map(|n| n.line)
            .unwrap_or(lines.len());
        let empty = lines[h.line + 1..end].iter().all(|l| l.trim().is_empty());
        if empty {
            push(
                Severity::Warning,
                format!("empty section at line {} ({})", offset + h.line + 1, h.text),
            );
        }
    }

    ValidationReport::from_findings(findings)
}

fn resolves(skill: &SkillDir, path: &RelPath) -> bool {
    if skill.contains(path) {
        return true;
    }
    // a link to a directory resolves if anything lives under it
    let prefix = format!("{}/", path.as_str());
    skill.resources.keys().any(|p| p.as_str().starts_with(&prefix))
}
