//! Run directories: atomic file writes and the checksummed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reproducibility record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    /// Canonical configuration text, enough to rerun.
    pub config: String,
    pub master_seed: u64,
    pub timestamp_unix: u64,
    /// `started` while running, `complete` once every output is written.
    pub status: String,
    /// Evaluator name to SHA-256 of its parameter file.
    pub evaluator_artifacts: BTreeMap<String, String>,
    /// Output path relative to the run directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &str, config_hash: &str, master_seed: u64) -> Self {
        let timestamp_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            config: config.to_string(),
            master_seed,
            timestamp_unix,
            status: "started".into(),
            evaluator_artifacts: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A run directory. Every write goes through here so the manifest sees it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Refuses a directory that already holds a manifest unless `force`.
    /// Writes the manifest in its `started` state.
    pub fn create(root: &Path, force: bool, manifest: RunManifest) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        if mpath.exists() && !force {
            return Err(Error::OutputExists(root.to_path_buf()));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let dir = Self {
            root: root.to_path_buf(),
            manifest,
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.root.join(MANIFEST_FILE), &json)
    }

    /// Writes `rel` atomically and records its checksum.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.manifest.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Marks the manifest complete.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.status = "complete".into();
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(root: &Path) -> Result<RunManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Recomputes every output checksum listed in the manifest.
pub fn verify_run(root: &Path) -> Result<RunManifest> {
    let manifest = read_manifest(root)?;
    if manifest.status != "complete" {
        return Err(Error::ChecksumMismatch(format!("run status is `{}`", manifest.status)));
    }
    let mut bad = Vec::new();
    for (rel, want) in &manifest.outputs {
        match fs::read(root.join(rel)) {
            Ok(bytes) if &sha256_hex(&bytes) == want => {}
            Ok(_) => bad.push(format!("{rel} changed")),
            Err(_) => bad.push(format!("{rel} missing")),
        }
    }
    if bad.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::ChecksumMismatch(bad.join("; ")))
    }
}
