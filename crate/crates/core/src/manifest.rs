//! Run manifest and run-directory lock.
//!
//! The manifest records the config hash, per-stage inputs and outputs with
//! their SHA-256, and seeds. It is rewritten atomically whenever a stage
//! starts or finishes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".snailopt.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: BTreeMap<String, StageRecord>,
    pub seeds: BTreeMap<String, u64>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_entry(run_dir: &Path, rel: &str) -> Result<FileEntry> {
    let path = run_dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl Manifest {
    pub fn new(config_hash: &str) -> Self {
        let t = now();
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            created_unix: t,
            updated_unix: t,
            stages: BTreeMap::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(run_dir);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::parse(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Loads the manifest for `config_hash`, creating one if absent. A
    /// manifest written for a different config is refused unless `force`,
    /// in which case it is replaced.
    pub fn open(run_dir: &Path, config_hash: &str, force: bool) -> Result<Self> {
        match Self::load(run_dir)? {
            Some(m) if m.config_hash == config_hash => Ok(m),
            Some(m) if !force => Err(Error::Config(format!(
                "run directory {} was produced by a different config (hash {}…, now {}…); \
                 use --force to overwrite",
                run_dir.display(),
                &m.config_hash[..12.min(m.config_hash.len())],
                &config_hash[..12.min(config_hash.len())]
            ))),
            _ => Ok(Self::new(config_hash)),
        }
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<()> {
        self.updated_unix = now();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&Self::path(run_dir), text.as_bytes())
    }

    pub fn begin_stage(&mut self, run_dir: &Path, stage: &str, inputs: &[&str]) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| file_entry(run_dir, p))
            .collect::<Result<Vec<_>>>()?;
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                status: StageStatus::Running,
                config_hash: self.config_hash.clone(),
                started_unix: now(),
                finished_unix: None,
                inputs,
                outputs: Vec::new(),
            },
        );
        self.save(run_dir)
    }

    pub fn finish_stage(&mut self, run_dir: &Path, stage: &str, outputs: &[String]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| file_entry(run_dir, p))
            .collect::<Result<Vec<_>>>()?;
        let rec = self
            .stages
            .get_mut(stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} was never started")))?;
        rec.status = StageStatus::Complete;
        rec.finished_unix = Some(now());
        rec.outputs = outputs;
        self.save(run_dir)
    }

    pub fn fail_stage(&mut self, run_dir: &Path, stage: &str) -> Result<()> {
        if let Some(rec) = self.stages.get_mut(stage) {
            rec.status = StageStatus::Failed;
            rec.finished_unix = Some(now());
        }
        self.save(run_dir)
    }

    /// A stage is reusable when it completed under the current config and
    /// all of its recorded outputs are still on disk unchanged.
    pub fn stage_is_current(&self, run_dir: &Path, stage: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.status == StageStatus::Complete
            && rec.config_hash == self.config_hash
            && rec
                .outputs
                .iter()
                .all(|f| file_entry(run_dir, &f.path).map(|now| now == *f).unwrap_or(false))
    }

    /// Every file listed by any stage.
    pub fn listed_files(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .stages
            .values()
            .flat_map(|s| s.inputs.iter().chain(&s.outputs))
            .map(|f| f.path.as_str())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory is locked by another instance ({}); remove it if that run is dead",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
