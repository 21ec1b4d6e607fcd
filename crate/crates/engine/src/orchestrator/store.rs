//! On-disk run directories.
//!
//! ```text
//! runs/<run_id>/run.log              one JSON log record per line
//! runs/<run_id>/scene.png, scene.json
//! runs/<run_id>/locator.json
//! runs/<run_id>/prompt.txt, prompt.json
//! runs/<run_id>/highlight.png
//! runs/<run_id>/candidates/<id>.png
//! runs/<run_id>/masks/<id>.png
//! runs/<run_id>/eval.json
//! runs/<run_id>/stale/v<version>/...  superseded artifacts
//! ```

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use bikelane_core::workflow::{replay, LogBody, LogEntry, PipelineRun, ReplayError};

use crate::imaging::sha256_hex;

pub const LOG_FILE: &str = "run.log";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run {0} not found")]
    NotFound(String),
    #[error("artifact {artifact}: {detail}")]
    Integrity { artifact: String, detail: String },
    #[error("run log line {line}: {detail}")]
    CorruptLog { line: usize, detail: String },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        valid_id(run_id) && self.run_dir(run_id).join(LOG_FILE).is_file()
    }

    /// Ids of every run directory that has a log, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io(&self.root)(e)),
        };
        for entry in entries {
            let entry = entry.map_err(io(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn read_log(&self, run_id: &str) -> Result<Vec<LogEntry>, StoreError> {
        if !self.exists(run_id) {
            return Err(StoreError::NotFound(run_id.to_string()));
        }
        let path = self.run_dir(run_id).join(LOG_FILE);
        let file = File::open(&path).map_err(io(&path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| StoreError::CorruptLog {
                line: i + 1,
                detail: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(entries)
    }

    /// Replays the log and checks every recorded artifact against its hash.
    pub fn load(&self, run_id: &str) -> Result<PipelineRun, StoreError> {
        let run = replay(&self.read_log(run_id)?)?;
        let dir = self.run_dir(run_id);
        for (name, hash) in &run.artifacts {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| StoreError::Integrity {
                artifact: name.clone(),
                detail: e.to_string(),
            })?;
            let actual = sha256_hex(&bytes);
            if &actual != hash {
                return Err(StoreError::Integrity {
                    artifact: name.clone(),
                    detail: format!("expected sha256 {hash}, found {actual}"),
                });
            }
        }
        Ok(run)
    }

    pub fn read_artifact(&self, run_id: &str, name: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.run_dir(run_id).join(name);
        fs::read(&path).map_err(io(&path))
    }

    /// Moves archived files, writes new artifacts and appends the log record.
    pub fn commit(&self, run_id: &str, entry: &LogEntry, files: &[(String, Vec<u8>)]) -> Result<(), StoreError> {
        let dir = self.run_dir(run_id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        if let LogBody::Transition { archived, .. } = &entry.body {
            for a in archived {
                let from = dir.join(&a.from);
                let to = dir.join(&a.to);
                if let Some(parent) = to.parent() {
                    fs::create_dir_all(parent).map_err(io(parent))?;
                }
                fs::rename(&from, &to).map_err(io(&from))?;
            }
        }
        for (name, bytes) in files {
            write_atomic(&dir.join(name), bytes)?;
        }
        let path = dir.join(LOG_FILE);
        let mut line = serde_json::to_string(entry).expect("log entries serialize");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        f.sync_data().map_err(io(&path))?;
        Ok(())
    }

    /// Files in the run directory that no run version references.
    pub fn orphans(&self, run: &PipelineRun) -> Result<Vec<String>, StoreError> {
        let dir = self.run_dir(run.run_id());
        let known: BTreeSet<&str> = run.artifacts.keys().map(String::as_str).collect();
        let mut out = Vec::new();
        walk(&dir, &dir, &mut |rel| {
            if rel != LOG_FILE && !known.contains(rel) {
                out.push(rel.to_string());
            }
        })?;
        out.sort();
        Ok(out)
    }
}

fn walk(base: &Path, dir: &Path, f: &mut dyn FnMut(&str)) -> Result<(), StoreError> {
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let path = entry.path();
        if path.is_dir() {
            walk(base, &path, f)?;
        } else if let Ok(rel) = path.strip_prefix(base) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            f(&rel);
        }
    }
    Ok(())
}

/// Run ids are lowercase hex; anything else never names a directory.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}
