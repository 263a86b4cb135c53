//! Skill directories: a root `SKILL.md` plus scripts, references and assets.

pub mod markdown;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::paths::{PathError, RelPath};
pub use validate::{validate_skill, Finding, Severity, ValidationReport};

pub const ROOT_DOC: &str = "SKILL.md";

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("no {ROOT_DOC} at the root of {0}")]
    MissingRootDoc(PathBuf),
    #[error("malformed frontmatter: {0}")]
    MalformedFrontmatter(String),
    #[error("{0} is not valid UTF-8")]
    NotUtf8(String),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("refusing to write into non-empty directory {0}")]
    TargetNotEmpty(PathBuf),
    #[error("invalid resource path: {0}")]
    InvalidPath(#[from] PathError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SkillError + '_ {
    move |source| SkillError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Script,
    Reference,
    Asset,
}

impl ResourceKind {
    pub fn for_path(path: &RelPath) -> Self {
        if !path.is_nested() {
            return ResourceKind::Reference;
        }
        match path.top_level() {
            "scripts" => ResourceKind::Script,
            "assets" => ResourceKind::Asset,
            _ => ResourceKind::Reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub kind: ResourceKind,
    pub content: Vec<u8>,
}

impl Resource {
    pub fn new(path: &RelPath, content: Vec<u8>) -> Self {
        Resource { kind: ResourceKind::for_path(path), content }
    }

    pub fn text(&self) -> Option<&str> {
        std::str::from_utf8(&self.content).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heading {
    pub level: u8,
    /// Full heading line, trimmed.
    pub text: String,
}

/// A heading-delimited slice of the body. `text` starts with the heading
/// line (if any) and runs up to the next heading of any level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub heading: Option<Heading>,
    pub text: String,
}

/// Parsed root document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillDoc {
    pub frontmatter: BTreeMap<String, String>,
    frontmatter_raw: Option<String>,
    pub sections: Vec<Section>,
}

/// One occurrence returned by [`find_section`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionMatch {
    /// Index into `SkillDoc::sections`.
    pub index: usize,
    pub heading: Heading,
    /// 0-based line of the heading within the whole file.
    pub line: usize,
    /// 0-based exclusive line where the section's extent ends: the next
    /// heading of the same or a higher level, or end of file.
    pub extent_end: usize,
}

impl SkillDoc {
    pub fn parse(text: &str) -> Result<Self, SkillError> {
        let (raw, body) =
            markdown::split_frontmatter(text).map_err(SkillError::MalformedFrontmatter)?;
        let frontmatter = match raw {
            Some(raw) => parse_frontmatter(markdown::frontmatter_inner(raw))?,
            None => BTreeMap::new(),
        };
        let heads = markdown::headings(body);
        let mut sections = Vec::with_capacity(heads.len() + 1);
        let first = heads.first().map(|h| h.offset).unwrap_or(body.len());
        if first > 0 {
            sections.push(Section { heading: None, text: body[..first].to_string() });
        }
        for (i, h) in heads.iter().enumerate() {
            let end = heads.get(i + 1).map(|n| n.offset).unwrap_or(body.len());
            sections.push(Section {
                heading: Some(Heading { level: h.level, text: h.text.clone() }),
                text: body[h.offset..end].to_string(),
            });
        }
        Ok(SkillDoc { frontmatter, frontmatter_raw: raw.map(str::to_string), sections })
    }

    pub fn has_frontmatter(&self) -> bool {
        self.frontmatter_raw.is_some()
    }

    pub fn frontmatter_raw(&self) -> Option<&str> {
        self.frontmatter_raw.as_deref()
    }

    pub fn name(&self) -> Option<&str> {
        self.frontmatter.get("name").map(String::as_str)
    }

    pub fn description(&self) -> Option<&str> {
        self.frontmatter.get("description").map(String::as_str)
    }

    pub fn body(&self) -> String {
        self.sections.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = self.frontmatter_raw.clone().unwrap_or_default();
        for s in &self.sections {
            out.push_str(&s.text);
        }
        out
    }

    /// Number of file lines taken by the frontmatter block.
    pub fn body_line_offset(&self) -> usize {
        self.frontmatter_raw.as_deref().map(markdown::line_count).unwrap_or(0)
    }

    /// Heading matches with file-relative line numbers and section extents.
    fn matches(&self) -> Vec<SectionMatch> {
        let mut line = self.body_line_offset();
        let mut found = Vec::new();
        for (index, s) in self.sections.iter().enumerate() {
            if let Some(h) = &s.heading {
                found.push(SectionMatch { index, heading: h.clone(), line, extent_end: 0 });
            }
            line += markdown::line_count(&s.text);
        }
        let total = line;
        for i in 0..found.len() {
            let level = found[i].heading.level;
            found[i].extent_end = found[i + 1..]
                .iter()
                .find(|m| m.heading.level <= level)
                .map(|m| m.line)
                .unwrap_or(total);
        }
        found
    }
}

fn parse_frontmatter(inner: &str) -> Result<BTreeMap<String, String>, SkillError> {
    let value: serde_yaml::Value = serde_yaml::from_str(inner)
        .map_err(|e| SkillError::MalformedFrontmatter(e.to_string()))?;
    let mapping = match value {
        serde_yaml::Value::Null => return Ok(BTreeMap::new()),
        serde_yaml::Value::Mapping(m) => m,
        _ => return Err(SkillError::MalformedFrontmatter("frontmatter is not a mapping".into())),
    };
    let mut out = BTreeMap::new();
    for (k, v) in mapping {
        let key = match k {
            serde_yaml::Value::String(s) => s,
            other => yaml_scalar(&other),
        };
        out.insert(key, yaml_scalar(&v));
    }
    Ok(out)
}

fn yaml_scalar(v: &serde_yaml::Value) -> String {
    match v {
        serde_yaml::Value::Null => String::new(),
        serde_yaml::Value::String(s) => s.clone(),
        serde_yaml::Value::Bool(b) => b.to_string(),
        serde_yaml::Value::Number(n) => n.to_string(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim_end().to_string(),
    }
}

/// All sections whose heading line equals `anchor` (both trimmed), in
/// document order.
pub fn find_section(doc: &SkillDoc, anchor: &str) -> Vec<SectionMatch> {
    let anchor = anchor.trim();
    doc.matches().into_iter().filter(|m| m.heading.text == anchor).collect()
}

/// Same lookup as [`find_section`] over arbitrary markdown text, used for
/// anchoring edits in reference files.
pub fn find_section_in_text(text: &str, anchor: &str) -> Result<Vec<SectionMatch>, SkillError> {
    Ok(find_section(&SkillDoc::parse(text)?, anchor))
}

/// A skill directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillDir {
    pub root: SkillDoc,
    pub resources: BTreeMap<RelPath, Resource>,
}

impl SkillDir {
    pub fn new(root: SkillDoc) -> Self {
        SkillDir { root, resources: BTreeMap::new() }
    }

    /// Builds a skill from a flat file map. `SKILL.md` must be present.
    pub fn from_files(files: BTreeMap<RelPath, Vec<u8>>) -> Result<Self, SkillError> {
        let mut files = files;
        let root_key = RelPath::new(ROOT_DOC).expect("static path");
        let root_bytes = files
            .remove(&root_key)
            .ok_or_else(|| SkillError::MissingRootDoc(PathBuf::from(".")))?;
        let root_text =
            String::from_utf8(root_bytes).map_err(|_| SkillError::NotUtf8(ROOT_DOC.into()))?;
        let root = SkillDoc::parse(&root_text)?;
        let resources = files
            .into_iter()
            .map(|(p, bytes)| {
                let r = Resource::new(&p, bytes);
                (p, r)
            })
            .collect();
        Ok(SkillDir { root, resources })
    }

    /// Every file in the skill, root document first, in path order.
    pub fn files(&self) -> BTreeMap<RelPath, Vec<u8>> {
        let mut out: BTreeMap<RelPath, Vec<u8>> =
            self.resources.iter().map(|(p, r)| (p.clone(), r.content.clone())).collect();
        out.insert(RelPath::new(ROOT_DOC).expect("static path"), self.root.render().into_bytes());
        out
    }

    pub fn contains(&self, path: &RelPath) -> bool {
        path.as_str() == ROOT_DOC || self.resources.contains_key(path)
    }

    /// Text of a file, or `None` if absent or not UTF-8.
    pub fn file_text(&self, path: &RelPath) -> Option<String> {
        if path.as_str() == ROOT_DOC {
            return Some(self.root.render());
        }
        self.resources.get(path).and_then(|r| r.text()).map(str::to_string)
    }

    /// Sha-256 over `(path, len, bytes)` of every file in path order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (p, bytes) in self.files() {
            h.update(p.as_str().as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }
}

/// Loads every regular file below `path` into a [`SkillDir`].
pub fn load_skill(path: &Path) -> Result<SkillDir, SkillError> {
    if !path.is_dir() {
        return Err(SkillError::NotADirectory(path.to_path_buf()));
    }
    if !path.join(ROOT_DOC).is_file() {
        return Err(SkillError::MissingRootDoc(path.to_path_buf()));
    }
    let mut files = BTreeMap::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| SkillError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(path).expect("walkdir yields children");
        let rel = RelPath::from_path(rel)?;
        let bytes = fs::read(entry.path()).map_err(io_err(entry.path()))?;
        files.insert(rel, bytes);
    }
    SkillDir::from_files(files)
}

/// Writes the skill under `path`, which must be absent or empty.
pub fn save_skill(skill: &SkillDir, path: &Path) -> Result<(), SkillError> {
    if path.exists() {
        if !path.is_dir() {
            return Err(SkillError::NotADirectory(path.to_path_buf()));
        }
        let mut it = fs::read_dir(path).map_err(io_err(path))?;
        if it.next().is_some() {
            return Err(SkillError::TargetNotEmpty(path.to_path_buf()));
        }
    }
    fs::create_dir_all(path).map_err(io_err(path))?;
    for (rel, bytes) in skill.files() {
        let target = rel.to_path_under(path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&target, bytes).map_err(io_err(&target))?;
    }
    Ok(())
}
