//! Executes the fine-tuning grid into a run store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use lineadapt::active::{build_active_series, write_scores_csv, PoolLine};
use lineadapt::corpus::{read_manifest, Corpus, LineRecord, Split};
use lineadapt::finetune::{build_series, finetune, Control, CurveKind, EvalSet, Sample, SeriesPlan};
use lineadapt::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Recognizer};
use lineadapt::stopping::{argmin, run_x4_folds, FIXED_EPOCH, X4_FOLDS};
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::spec::{Cell, CheckpointPolicy, ExperimentSpec, Selection};
use crate::store::{fold_path, sha256_file, write_json, write_trace, BaselineRecord, RunRecord, RunStatus, Store};

/// Everything a run needs, loaded once per invocation.
pub struct GridContext {
    pub spec: ExperimentSpec,
    pub corpus: Corpus,
    pub baseline: Recognizer,
    pub baseline_sha256: String,
    by_id: HashMap<String, usize>,
    plans: BTreeMap<(Selection, u32, usize), SeriesPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GridSummary {
    pub executed: usize,
    pub skipped: usize,
}

impl GridContext {
    /// Loads corpus and checkpoint. Paths in the spec are taken relative to
    /// `base_dir` unless absolute.
    pub fn load(spec: ExperimentSpec, base_dir: &Path) -> Result<Self> {
        spec.validate()?;
        let manifest = base_dir.join(&spec.corpus);
        let corpus = read_manifest(&manifest)?;
        let ckpt = base_dir.join(&spec.baseline);
        let (baseline, _) = load_checkpoint(&ckpt)?;
        let baseline_sha256 = sha256_file(&ckpt)?;
        Self::new(spec, corpus, baseline, baseline_sha256)
    }

    pub fn new(spec: ExperimentSpec, corpus: Corpus, baseline: Recognizer, baseline_sha256: String) -> Result<Self> {
        spec.validate()?;
        let by_id = corpus.lines.iter().enumerate().map(|(i, l)| (l.line_id.clone(), i)).collect();
        Ok(GridContext { spec, corpus, baseline, baseline_sha256, by_id, plans: BTreeMap::new() })
    }

    pub fn target_writers(&self) -> Vec<u32> {
        self.corpus.target_writers().map(|w| w.writer_id).collect()
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.spec.cells(&self.target_writers())
    }

    pub fn line(&self, id: &str) -> Result<&LineRecord> {
        self.by_id
            .get(id)
            .map(|&i| &self.corpus.lines[i])
            .ok_or_else(|| HarnessError::Spec(format!("line {id} is not in the corpus")))
    }

    fn pool_ids(&self, writer: u32) -> Vec<String> {
        self.corpus.lines_of(writer, Split::FinetunePool).iter().map(|l| l.line_id.clone()).collect()
    }

    fn test_samples(&self, writer: u32) -> Vec<Sample<'_>> {
        self.corpus
            .lines_of(writer, Split::TargetTest)
            .into_iter()
            .map(|l| Sample { image: &l.image, transcript: &l.transcript })
            .collect()
    }

    /// Random plans per (writer, series) and one active plan per writer,
    /// written alongside their scores.
    fn prepare_plans(&mut self, store: &Store, cells: &[Cell]) -> Result<()> {
        for c in cells {
            let key = match c.selection {
                Selection::Random => (Selection::Random, c.writer, c.series),
                Selection::Active => (Selection::Active, c.writer, 0),
            };
            if self.plans.contains_key(&key) {
                continue;
            }
            let levels = [self.spec.max_level(c.selection)];
            let plan = match c.selection {
                Selection::Random => build_series(c.writer, &self.pool_ids(c.writer), self.spec.series_seed(c.series), &levels)?,
                Selection::Active => {
                    let lines = self.corpus.lines_of(c.writer, Split::FinetunePool);
                    let pool: Vec<PoolLine> = lines.iter().map(|l| PoolLine { line_id: &l.line_id, image: &l.image }).collect();
                    let (plan, scores) = build_active_series(c.writer, &self.baseline, &pool, &levels, 0)?;
                    let path = store.scores_path(c.writer);
                    let mut buf = Vec::new();
                    write_scores_csv(&scores, &mut buf)?;
                    crate::store::write_atomic(&path, &buf)?;
                    plan
                }
            };
            self.plans.insert(key, plan);
        }
        Ok(())
    }

    fn plan(&self, cell: &Cell) -> &SeriesPlan {
        let series = if cell.selection == Selection::Active { 0 } else { cell.series };
        &self.plans[&(cell.selection, cell.writer, series)]
    }

    /// Run record for `cell`; requires plans to be prepared.
    pub fn record(&self, cell: &Cell) -> RunRecord {
        RunRecord {
            cell: *cell,
            config: self.spec.run.config(cell.setup, self.spec.run_seed(cell)),
            train_line_ids: self.plan(cell).subset(cell.level).to_vec(),
            val_lines: self.corpus.lines_of(cell.writer, Split::TargetTest).len(),
            baseline_sha256: self.baseline_sha256.clone(),
            // Below four lines X4 falls back to TRN_CER and needs no folds.
            x4: self.spec.wants_x4() && cell.level >= X4_FOLDS,
            config_hash: String::new(),
        }
        .with_hash()
    }

    /// Baseline CER on each writer's test lines, cached in the store per
    /// checkpoint hash.
    pub fn baseline_cer(&self, store: &Store) -> Result<BaselineRecord> {
        if let Ok(b) = store.read_baseline() {
            if b.checkpoint_sha256 == self.baseline_sha256 && self.target_writers().iter().all(|w| b.cer.contains_key(w)) {
                return Ok(b);
            }
        }
        let mut cer = BTreeMap::new();
        for w in self.target_writers() {
            let test = self.test_samples(w);
            let ev = EvalSet::new(&self.baseline, &test, self.spec.run.eval_batch_size)?.evaluate(&self.baseline, false)?;
            log::info!("baseline CER for writer {w}: {:.4}", ev.cer);
            cer.insert(w, ev.cer);
        }
        let rec = BaselineRecord { checkpoint_sha256: self.baseline_sha256.clone(), cer };
        write_json(&store.baseline_path(), &rec)?;
        Ok(rec)
    }

    fn execute(&self, store: &Store, cell: &Cell, record: &RunRecord) -> Result<()> {
        let started = Instant::now();
        let dir = store.run_dir(cell);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        }
        write_json(&dir.join("config.json"), record)?;
        let train: Vec<Sample> = record
            .train_line_ids
            .iter()
            .map(|id| self.line(id).map(|l| Sample { image: &l.image, transcript: &l.transcript }))
            .collect::<Result<_>>()?;
        let val = self.test_samples(cell.writer);
        let policy = self.spec.checkpoints;
        let mut snaps = Snapshots::default();
        let outcome = finetune(&self.baseline, &record.config, &train, &val, |row, model| {
            if policy == CheckpointPolicy::Decided {
                snaps.observe(row, model);
            }
            Control::Continue
        })?;
        write_trace(&dir.join("trace.csv"), &outcome.trace)?;
        if record.x4 {
            for (k, t) in run_x4_folds(&self.baseline, &record.config, &train)?.iter().enumerate() {
                write_trace(&fold_path(&dir, k), t)?;
            }
        }
        if policy != CheckpointPolicy::None {
            let meta = CheckpointMeta::from([("run".to_string(), cell.key())]);
            let ckdir = dir.join("checkpoints");
            fs::create_dir_all(&ckdir).map_err(|e| HarnessError::io(&ckdir, e))?;
            save_checkpoint(&outcome.model, &meta, &ckdir.join("final.ckpt"))?;
            for (name, m) in snaps.into_named() {
                save_checkpoint(&m, &meta, &ckdir.join(format!("{name}.ckpt")))?;
            }
        }
        let status = RunStatus {
            config_hash: record.config_hash.clone(),
            batch_size: outcome.trace.batch_size,
            aborted: outcome.trace.aborted,
            epochs_run: outcome.trace.epochs(),
            seconds: started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("status.json"), &status)?;
        let last = outcome.trace.rows.last();
        log::info!(
            "{}: {} epochs in {:.0}s, final val CER {:.4}, best {:.4}",
            cell.key(),
            status.epochs_run,
            status.seconds,
            last.map_or(f64::NAN, |r| r.val_cer),
            argmin(&outcome.trace.curve(CurveKind::ValCer)).map_or(f64::NAN, |e| outcome.trace.rows[e - 1].val_cer),
        );
        Ok(())
    }
}

/// Models at the epochs chosen by the criteria decidable from the run's own
/// trace.
#[derive(Default)]
struct Snapshots {
    best_val: Option<(f64, Recognizer)>,
    first_zero: Option<Recognizer>,
    fixed: Option<Recognizer>,
}

impl Snapshots {
    fn observe(&mut self, row: &lineadapt::finetune::EpochRow, model: &Recognizer) {
        if self.best_val.as_ref().is_none_or(|(v, _)| row.val_cer < *v) {
            self.best_val = Some((row.val_cer, model.clone()));
        }
        if self.first_zero.is_none() && row.train_cer_clean == 0.0 {
            self.first_zero = Some(model.clone());
        }
        if row.epoch == FIXED_EPOCH {
            self.fixed = Some(model.clone());
        }
    }

    fn into_named(self) -> Vec<(&'static str, Recognizer)> {
        let mut out = Vec::new();
        if let Some((_, m)) = self.best_val {
            out.push(("TST_CER", m));
        }
        if let Some(m) = self.first_zero {
            out.push(("TRN_CER", m));
        }
        if let Some(m) = self.fixed {
            out.push(("EP_20", m));
        }
        out
    }
}

/// Runs every cell that is not already complete under its current config
/// hash, using `workers` threads.
pub fn run_grid(ctx: &mut GridContext, store: &Store, workers: usize, filter: Option<Selection>) -> Result<GridSummary> {
    write_json(&store.spec_path(), &ctx.spec)?;
    let cells: Vec<Cell> = ctx.cells().into_iter().filter(|c| filter.is_none_or(|s| c.selection == s)).collect();
    ctx.prepare_plans(store, &cells)?;
    ctx.baseline_cer(store)?;
    let mut todo = Vec::new();
    for c in &cells {
        let rec = ctx.record(c);
        if !store.is_complete(c, &rec.config_hash, rec.x4) {
            todo.push((*c, rec));
        }
    }
    let summary = GridSummary { executed: todo.len(), skipped: cells.len() - todo.len() };
    log::info!("grid: {} runs to execute, {} already complete", summary.executed, summary.skipped);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Spec(format!("worker pool: {e}")))?;
    let ctx = &*ctx;
    pool.install(|| todo.par_iter().try_for_each(|(c, rec)| ctx.execute(store, c, rec)))?;
    Ok(summary)
}
