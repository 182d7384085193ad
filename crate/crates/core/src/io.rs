//! Atomic output sets and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_s: 0.0,
        }
    }
}

/// Files built in memory and committed together. Nothing touches the
/// target directory until every file has been staged.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Stages every file as a temporary in `dir`, then renames them into
    /// place, finishing with the manifest.
    pub fn commit(self, dir: &Path, mut manifest: RunManifest) -> Result<RunManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.outputs = self.files.iter().map(|(n, _)| dir.join(n)).collect();
        manifest.outputs.push(dir.join(MANIFEST_FILE));
        let json = serde_json::to_vec_pretty(&manifest)?;
        let mut staged = Vec::with_capacity(self.files.len() + 1);
        for (name, bytes) in self.files.iter().map(|(n, b)| (n.as_str(), b.as_slice())).chain([(MANIFEST_FILE, json.as_slice())]) {
            staged.push((stage(dir, bytes)?, dir.join(name)));
        }
        for (tmp, target) in staged {
            tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
        }
        Ok(manifest)
    }
}

fn stage(dir: &Path, bytes: &[u8]) -> Result<NamedTempFile> {
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    Ok(tmp)
}

/// Writes one file atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    stage(dir, bytes)?
        .persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
