//! Append-only run store: one directory per grid cell.
//!
//! ```text
//! <root>/experiment.json
//! <root>/baseline.json
//! <root>/active/scores-w0003.csv
//! <root>/runs/<cell key>/config.json     full run configuration and its hash
//!                        trace.csv       one row per epoch
//!                        x4/fold{k}.csv  cross-validation traces (X4 only)
//!                        status.json     written last; marks the run complete
//!                        decision.json   one entry per criterion
//!                        checkpoints/    optional snapshots
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lineadapt::finetune::{EpochTrace, RunConfig};
use lineadapt::stopping::X4_FOLDS;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::spec::{Cell, ExperimentSpec};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| HarnessError::Json { path: path.into(), source })
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Writes through a temporary file so readers never see partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &json_bytes(value))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: Cell,
    pub config: RunConfig,
    pub train_line_ids: Vec<String>,
    pub val_lines: usize,
    pub baseline_sha256: String,
    pub x4: bool,
    /// SHA-256 of this record serialized with an empty hash.
    pub config_hash: String,
}

impl RunRecord {
    pub fn compute_hash(&self) -> String {
        let mut copy = self.clone();
        copy.config_hash.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&copy).expect("serializable")))
    }

    pub fn with_hash(mut self) -> Self {
        self.config_hash = self.compute_hash();
        self
    }
}

/// Contents of `status.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub config_hash: String,
    pub batch_size: usize,
    pub aborted: bool,
    pub epochs_run: usize,
    pub seconds: f64,
}

/// Baseline test CER per writer for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub checkpoint_sha256: String,
    pub cer: BTreeMap<u32, f64>,
}

/// A completed run loaded from disk.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub status: RunStatus,
    pub trace: EpochTrace,
    pub folds: Option<Vec<EpochTrace>>,
}

#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn spec_path(&self) -> PathBuf {
        self.root.join("experiment.json")
    }

    pub fn baseline_path(&self) -> PathBuf {
        self.root.join("baseline.json")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, cell: &Cell) -> PathBuf {
        self.runs_dir().join(cell.key())
    }

    pub fn scores_path(&self, writer: u32) -> PathBuf {
        self.root.join("active").join(format!("scores-w{writer:04}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn read_spec(&self) -> Result<ExperimentSpec> {
        read_json(&self.spec_path())
    }

    pub fn read_baseline(&self) -> Result<BaselineRecord> {
        read_json(&self.baseline_path())
    }

    /// True when the cell's run finished under exactly `hash`.
    pub fn is_complete(&self, cell: &Cell, hash: &str, x4: bool) -> bool {
        let dir = self.run_dir(cell);
        let status: Option<RunStatus> = read_json(&dir.join("status.json")).ok();
        status.is_some_and(|s| s.config_hash == hash)
            && dir.join("trace.csv").is_file()
            && (!x4 || (0..X4_FOLDS).all(|k| fold_path(&dir, k).is_file()))
    }

    pub fn load_run(&self, dir: &Path) -> Result<StoredRun> {
        let record: RunRecord = read_json(&dir.join("config.json"))?;
        let status: RunStatus = read_json(&dir.join("status.json"))?;
        if status.config_hash != record.config_hash || record.compute_hash() != record.config_hash {
            return Err(HarnessError::Integrity(format!("{}: config hash mismatch", dir.display())));
        }
        let trace = read_trace(&dir.join("trace.csv"), status.batch_size, status.aborted)?;
        let folds = if record.x4 {
            Some((0..X4_FOLDS).map(|k| read_trace(&fold_path(dir, k), 0, false)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(StoredRun { dir: dir.to_path_buf(), record, status, trace, folds })
    }

    /// Every completed run, ordered by cell.
    pub fn load_runs(&self) -> Result<Vec<StoredRun>> {
        let dir = self.runs_dir();
        let mut runs = Vec::new();
        if !dir.is_dir() {
            return Ok(runs);
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| HarnessError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("status.json").is_file())
            .collect();
        entries.sort();
        for p in entries {
            runs.push(self.load_run(&p)?);
        }
        runs.sort_by_key(|r| r.record.cell);
        Ok(runs)
    }
}

pub fn fold_path(run_dir: &Path, k: usize) -> PathBuf {
    run_dir.join("x4").join(format!("fold{k}.csv"))
}

pub fn read_trace(path: &Path, batch_size: usize, aborted: bool) -> Result<EpochTrace> {
    let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(EpochTrace::read_csv(f, batch_size, aborted)?)
}

pub fn write_trace(path: &Path, trace: &EpochTrace) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    write_atomic(path, &buf)
}
