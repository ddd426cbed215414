//! Run manifests, the checkpoint-directory lock and orphan detection.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::checkpoint::{file_hash, write_atomic};
use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".lock";
const MANIFEST_PREFIX: &str = "manifest-";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    /// Records the canonical path so manifests stay valid from any directory.
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: fs::canonicalize(path).map_err(|e| Error::io(path, e))?,
            sha256: file_hash(path)?,
        })
    }
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub consumed: Vec<Artifact>,
    pub produced: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds,
            consumed: Vec::new(),
            produced: Vec::new(),
        }
    }

    pub fn consume(&mut self, path: &Path) -> Result<()> {
        self.consumed.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn produce(&mut self, path: &Path) -> Result<()> {
        self.produced.push(Artifact::of(path)?);
        Ok(())
    }

    /// Writes `manifest-<command>-<n>.json` into `dir`, `n` being the first
    /// unused index.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut n = 0;
        let path = loop {
            let p = dir.join(format!("{MANIFEST_PREFIX}{}-{n}.json", self.command));
            if !p.exists() {
                break p;
            }
            n += 1;
        };
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

/// Exclusive writer lock on a directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn is_manifest(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with(MANIFEST_PREFIX) && n.ends_with(".json"))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Files under `roots` that no manifest found under `roots` lists as
/// produced or consumed. A checkpoint sidecar counts as reachable when its
/// checkpoint is; manifests and lock files are exempt.
pub fn orphans(roots: &[&Path]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in roots {
        walk(r, &mut files)?;
    }
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let mut reachable = BTreeSet::new();
    for m in files.iter().filter(|p| is_manifest(p)) {
        let bytes = fs::read(m).map_err(|e| Error::io(m, e))?;
        let manifest: RunManifest = serde_json::from_slice(&bytes)?;
        for a in manifest.produced.iter().chain(&manifest.consumed) {
            let c = canon(&a.path);
            reachable.insert(crate::checkpoint::sidecar_path(&c));
            reachable.insert(c);
        }
    }
    let mut out: Vec<PathBuf> = files
        .into_iter()
        .filter(|p| !is_manifest(p) && p.file_name().is_some_and(|n| n != LOCK_FILE))
        .filter(|p| !reachable.contains(&canon(p)))
        .collect();
    out.sort();
    Ok(out)
}
