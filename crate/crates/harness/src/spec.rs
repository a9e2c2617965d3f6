//! Experiment description and the cells it expands to.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use lineadapt::augment::AugmentConfig;
use lineadapt::finetune::{RunConfig, DEFAULT_LEVELS};
use lineadapt::model::Setup;
use lineadapt::seed;
use lineadapt::stats::N_RESAMPLES;
use lineadapt::stopping::{Criterion, ThresholdMode};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// How a series orders the writer's pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Seeded shuffle.
    Random,
    /// Ascending baseline confidence.
    Active,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Random => "random",
            Selection::Active => "active",
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Selection {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selection::Random),
            "active" => Ok(Selection::Active),
            _ => Err(HarnessError::Spec(format!("unknown selection {s:?}"))),
        }
    }
}

/// Which model snapshots a run keeps on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Traces only; every decision can be re-derived from them.
    #[default]
    None,
    Final,
    /// Final model plus the epochs picked by TST_CER, TRN_CER and EP_20.
    Decided,
}

/// Training settings shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunTemplate {
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
    pub eval_batch_size: usize,
}

impl Default for RunTemplate {
    fn default() -> Self {
        let c = RunConfig::default();
        RunTemplate {
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            max_batch_size: c.max_batch_size,
            weight_decay: c.weight_decay,
            grad_clip: c.grad_clip,
            augment: c.augment,
            eval_batch_size: c.eval_batch_size,
        }
    }
}

impl RunTemplate {
    pub fn config(&self, setup: Setup, seed: u64) -> RunConfig {
        RunConfig {
            mask: setup.mask(),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            max_batch_size: self.max_batch_size,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            augment: self.augment.clone(),
            seed,
            eval_every: 1,
            eval_batch_size: self.eval_batch_size,
        }
    }
}

/// A rectangular slice of the study: every combination of its setups,
/// levels, writers and series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBlock {
    pub selection: Selection,
    pub setups: Vec<Setup>,
    pub levels: Vec<usize>,
    /// Target writers; `None` means all of them.
    pub writers: Option<Vec<u32>>,
    pub n_series: usize,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock {
            selection: Selection::Random,
            setups: vec![Setup::All],
            levels: DEFAULT_LEVELS.to_vec(),
            writers: None,
            n_series: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Corpus manifest.
    pub corpus: PathBuf,
    /// Pretrained checkpoint every run starts from.
    pub baseline: PathBuf,
    pub blocks: Vec<GridBlock>,
    pub criteria: Vec<Criterion>,
    pub run: RunTemplate,
    /// Root of every seed in the study.
    pub seed: u64,
    pub checkpoints: CheckpointPolicy,
    pub threshold_mode: ThresholdMode,
    pub scale_factors: Vec<f64>,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            corpus: PathBuf::from("corpus/manifest.jsonl"),
            baseline: PathBuf::from("baseline.ckpt"),
            blocks: vec![GridBlock::default()],
            criteria: Criterion::ALL.to_vec(),
            run: RunTemplate::default(),
            seed: 0,
            checkpoints: CheckpointPolicy::None,
            threshold_mode: ThresholdMode::RecordedMean,
            scale_factors: vec![0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
            bootstrap_resamples: N_RESAMPLES,
        }
    }
}

/// One fine-tuning run of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub selection: Selection,
    pub setup: Setup,
    pub writer: u32,
    pub level: usize,
    pub series: usize,
}

impl Cell {
    /// Directory name inside the store; also the seed label.
    pub fn key(&self) -> String {
        format!("{}-{}-w{:04}-l{:03}-s{:02}", self.selection, self.setup, self.writer, self.level, self.series)
    }

    /// Groups runs whose traces serve as each other's references.
    pub fn slot(&self) -> (Selection, Setup, usize) {
        (self.selection, self.setup, self.level)
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Spec(m.into()));
        if self.blocks.is_empty() {
            return bad("no grid blocks");
        }
        for b in &self.blocks {
            if b.setups.is_empty() || b.levels.is_empty() || b.n_series == 0 {
                return bad("every block needs setups, levels and at least one series");
            }
            if b.levels.contains(&0) {
                return bad("levels must be positive");
            }
            if b.writers.as_ref().is_some_and(|w| w.is_empty()) {
                return bad("an explicit writer list must not be empty");
            }
        }
        if self.scale_factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return bad("scale factors must be positive");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be positive");
        }
        self.run.config(Setup::All, 0).validate()?;
        Ok(())
    }

    /// Every cell of every block, sorted and deduplicated. `all_writers`
    /// substitutes for blocks without a writer list.
    pub fn cells(&self, all_writers: &[u32]) -> Vec<Cell> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let writers = b.writers.clone().unwrap_or_else(|| all_writers.to_vec());
            for &setup in &b.setups {
                for &writer in &writers {
                    for &level in &b.levels {
                        for series in 0..b.n_series {
                            out.push(Cell { selection: b.selection, setup, writer, level, series });
                        }
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Largest level any block asks of `writer` under `selection`.
    pub fn max_level(&self, selection: Selection) -> usize {
        self.blocks.iter().filter(|b| b.selection == selection).flat_map(|b| b.levels.iter().copied()).max().unwrap_or(0)
    }

    /// Seed of the pool shuffle shared by all levels of one series.
    pub fn series_seed(&self, series: usize) -> u64 {
        seed::derive(self.seed, "series", series as u64)
    }

    /// Seed of one run's batching, augmentation and X4 folds.
    pub fn run_seed(&self, cell: &Cell) -> u64 {
        seed::derive(self.seed, &format!("run/{}", cell.key()), 0)
    }

    pub fn bootstrap_seed(&self) -> u64 {
        seed::derive(self.seed, "bootstrap", 0)
    }

    pub fn wants_x4(&self) -> bool {
        self.criteria.contains(&Criterion::X4)
    }
}
