//! Run ledger and run-directory lock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use roomdiff::metrics::MetricReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, InPhase};

pub const LEDGER_FILE: &str = "ledger.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub run_id: String,
    pub config_hash: String,
    pub provenance: String,
    pub phases: Vec<PhaseEntry>,
    pub reports: Vec<MetricReport>,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// SHA-256 of a file, or of every file under a directory in path order.
pub fn hash_path(path: &Path) -> std::io::Result<String> {
    let mut hasher = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    for f in files {
        if path.is_dir() {
            hasher.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        }
        hasher.update(fs::read(&f)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

impl RunLedger {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            run_id: format!("{}-{seed}", &config_hash[..12]),
            config_hash: config_hash.into(),
            provenance: format!("roomdiff-cli {} config:{}", env!("CARGO_PKG_VERSION"), &config_hash[..12]),
            phases: Vec::new(),
            reports: Vec::new(),
        }
    }

    /// Load the ledger of `dir`, or start one. A ledger written under another
    /// config is a resume mismatch.
    pub fn open(dir: &Path, config_hash: &str, seed: u64) -> CliResult<Self> {
        let path = dir.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash, seed));
        }
        let ledger: Self = serde_json::from_slice(&fs::read(&path).in_phase("ledger")?)
            .map_err(|e| CliError::new("LedgerError", "ledger", e.to_string()))?;
        if ledger.config_hash != config_hash {
            return Err(CliError::new(
                "ResumeMismatch",
                "ledger",
                format!(
                    "run directory was produced by config {}, current config is {}",
                    &ledger.config_hash[..12],
                    &config_hash[..12]
                ),
            ));
        }
        Ok(ledger)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join(LEDGER_FILE), serde_json::to_vec_pretty(self).expect("ledger serializes")).in_phase("ledger")
    }

    /// Record a finished phase. Re-running a phase replaces its entry, and an
    /// artifact path claimed by another phase moves to this one.
    pub fn record(
        &mut self,
        dir: &Path,
        phase: &str,
        started: f64,
        paths: &[&str],
        notes: BTreeMap<String, serde_json::Value>,
    ) -> CliResult<()> {
        let artifacts = paths
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.to_string(),
                    sha256: hash_path(&dir.join(p)).in_phase(phase)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        self.phases.retain(|e| e.phase != phase);
        for entry in &mut self.phases {
            entry.artifacts.retain(|a| !paths.contains(&a.path.as_str()));
        }
        self.phases.push(PhaseEntry {
            phase: phase.into(),
            started_unix: started,
            finished_unix: now_unix(),
            artifacts,
            notes,
        });
        Ok(())
    }

    pub fn phase(&self, phase: &str) -> Option<&PhaseEntry> {
        self.phases.iter().find(|e| e.phase == phase)
    }

    /// Artifact hashes by path; equal across runs of one config on one platform.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.phases
            .iter()
            .flat_map(|e| e.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())))
            .collect()
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).in_phase("lock")?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).in_phase("lock")?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                "LockHeld",
                "lock",
                format!("{} is in use by another command (remove {} if it is stale)", dir.display(), path.display()),
            )),
            Err(e) => Err(CliError::io("lock", e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerun_replaces_entry_and_moves_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        let mut l = RunLedger::new(&"0".repeat(64), 1);
        l.record(dir.path(), "one", 0.0, &["a.txt", "b.txt"], BTreeMap::new()).unwrap();
        l.record(dir.path(), "two", 0.0, &["b.txt"], BTreeMap::new()).unwrap();
        l.record(dir.path(), "one", 0.0, &["a.txt"], BTreeMap::new()).unwrap();
        assert_eq!(l.phases.len(), 2);
        let owners: Vec<usize> = ["a.txt", "b.txt"]
            .iter()
            .map(|p| l.phases.iter().filter(|e| e.artifacts.iter().any(|a| a.path == *p)).count())
            .collect();
        assert_eq!(owners, vec![1, 1]);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let held = RunLock::acquire(dir.path()).unwrap();
        assert_eq!(RunLock::acquire(dir.path()).unwrap_err().code, "LockHeld");
        drop(held);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn ledger_from_other_config_is_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        RunLedger::new(&"a".repeat(64), 1).save(dir.path()).unwrap();
        assert_eq!(RunLedger::open(dir.path(), &"b".repeat(64), 1).unwrap_err().code, "ResumeMismatch");
        assert!(RunLedger::open(dir.path(), &"a".repeat(64), 1).is_ok());
    }
}
