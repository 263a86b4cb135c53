use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::paths::{PathError, RelPath};

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("path {path:?} is outside the sandbox: {reason}")]
    Escape { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A directory that every tool call is confined to.
#[derive(Debug, Clone)]
pub struct Sandbox {
    root: PathBuf,
}

impl Sandbox {
    pub fn new(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Sandbox { root: root.canonicalize()? })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Maps a tool-supplied path to a location under the root. Absolute
    /// paths, `..` escapes and symlinks pointing outside are rejected.
    pub fn resolve(&self, raw: &str) -> Result<PathBuf, SandboxError> {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed == "." {
            return Ok(self.root.clone());
        }
        let rel = match RelPath::normalize(trimmed) {
            Ok(r) => r,
            Err(PathError::Empty) => return Ok(self.root.clone()),
            Err(e) => return Err(SandboxError::Escape { path: raw.to_string(), reason: e.to_string() }),
        };
        let joined = rel.to_path_under(&self.root);
        // the deepest existing ancestor decides where symlinks really lead
        let mut probe = joined.as_path();
        while !probe.exists() {
            match probe.parent() {
                Some(p) => probe = p,
                None => break,
            }
        }
        let real = probe.canonicalize()?;
        if !real.starts_with(&self.root) {
            return Err(SandboxError::Escape { path: raw.to_string(), reason: "symlink leaves the sandbox".into() });
        }
        Ok(joined)
    }

    /// `path` relative to the root, `/`-separated.
    pub fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| path.to_string_lossy().into_owned())
    }
}

/// Copies the tree at `from` into `to`, creating directories as needed.
pub fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    if from.is_file() {
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(from, to)?;
        return Ok(());
    }
    for entry in walkdir::WalkDir::new(from).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(from).expect("walk stays under root");
        let target = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShellOutput {
    pub status: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
}

impl ShellOutput {
    /// Observation text as shown to the model.
    pub fn render(&self, timeout: Duration) -> String {
        let mut out = String::new();
        if self.timed_out {
            out.push_str(&format!("error: command timed out after {}s\n", timeout.as_secs()));
        } else {
            out.push_str(&format!("exit code: {}\n", self.status.map_or("signal".to_string(), |c| c.to_string())));
        }
        if !self.stdout.is_empty() {
            out.push_str("stdout:\n");
            out.push_str(&self.stdout);
            if !self.stdout.ends_with('\n') {
                out.push('\n');
            }
        }
        if !self.stderr.is_empty() {
            out.push_str("stderr:\n");
            out.push_str(&self.stderr);
            if !self.stderr.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }
}

/// Runs `command` with `sh -c` in `cwd`, killing its process group after
/// `timeout`.
pub fn run_shell(cwd: &Path, command: &str, timeout: Duration) -> std::io::Result<ShellOutput> {
    use std::os::unix::process::CommandExt;

    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()?;
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let started = Instant::now();
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= timeout {
            timed_out = true;
            // the child leads its own process group, so this also reaches
            // anything it started in the background
            unsafe {
                libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
            }
            let _ = child.kill();
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(ShellOutput {
        status: status.code(),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        timed_out,
    })
}
