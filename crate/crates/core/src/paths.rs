//! Relative, normalized paths inside a skill directory or sandbox.

use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("empty path")]
    Empty,
    #[error("absolute path not allowed: {0}")]
    Absolute(String),
    #[error("path escapes its root: {0}")]
    Traversal(String),
    #[error("path is not normalized: {0}")]
    NotNormalized(String),
}

/// A forward-slash separated path relative to some root.
///
/// Construction rejects absolute paths, `..` components, `.` components,
/// empty components and backslashes, so a `RelPath` joined onto a root can
/// never leave it lexically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelPath(String);

impl RelPath {
    pub fn new(raw: &str) -> Result<Self, PathError> {
        if raw.is_empty() {
            return Err(PathError::Empty);
        }
        if raw.starts_with('/') || raw.contains('\\') || has_drive_prefix(raw) {
            return Err(PathError::Absolute(raw.to_string()));
        }
        for part in raw.split('/') {
            match part {
                ".." => return Err(PathError::Traversal(raw.to_string())),
                "" | "." => return Err(PathError::NotNormalized(raw.to_string())),
                _ => {}
            }
        }
        Ok(RelPath(raw.to_string()))
    }

    /// Lexically normalizes `raw` (dropping `.` and empty components and
    /// folding `..`), failing if the result would climb above the root.
    pub fn normalize(raw: &str) -> Result<Self, PathError> {
        if raw.starts_with('/') || has_drive_prefix(raw) {
            return Err(PathError::Absolute(raw.to_string()));
        }
        let mut parts: Vec<&str> = Vec::new();
        for part in raw.split(['/', '\\']) {
            match part {
                "" | "." => {}
                ".." => {
                    if parts.pop().is_none() {
                        return Err(PathError::Traversal(raw.to_string()));
                    }
                }
                p => parts.push(p),
            }
        }
        if parts.is_empty() {
            return Err(PathError::Empty);
        }
        Ok(RelPath(parts.join("/")))
    }

    pub fn from_path(path: &Path) -> Result<Self, PathError> {
        let mut parts = Vec::new();
        for c in path.components() {
            match c {
                Component::Normal(p) => parts.push(p.to_string_lossy().into_owned()),
                Component::CurDir => {}
                Component::ParentDir => {
                    return Err(PathError::Traversal(path.display().to_string()))
                }
                Component::RootDir | Component::Prefix(_) => {
                    return Err(PathError::Absolute(path.display().to_string()))
                }
            }
        }
        RelPath::new(&parts.join("/"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// First path component.
    pub fn top_level(&self) -> &str {
        self.0.split('/').next().unwrap_or("")
    }

    pub fn is_nested(&self) -> bool {
        self.0.contains('/')
    }

    pub fn to_path_under(&self, root: &Path) -> PathBuf {
        let mut out = root.to_path_buf();
        for part in self.0.split('/') {
            out.push(part);
        }
        out
    }
}

fn has_drive_prefix(raw: &str) -> bool {
    let b = raw.as_bytes();
    b.len() >= 2 && b[1] == b':' && b[0].is_ascii_alphabetic()
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for RelPath {
    type Error = PathError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        RelPath::new(&value)
    }
}

impl From<RelPath> for String {
    fn from(value: RelPath) -> Self {
        value.0
    }
}

impl AsRef<str> for RelPath {
    fn as_ref(&self) -> &str {
        &self.0
    }
}
