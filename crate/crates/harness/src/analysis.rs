//! Bootstrapped reports and stability sweeps over the run store.

use std::collections::BTreeMap;

use lineadapt::model::Setup;
use lineadapt::seed;
use lineadapt::stats::{aggregate, bootstrap_mean, BootstrapSummary, ResultsGrid, Statistic};
use lineadapt::stopping::Criterion;
use serde::{Deserialize, Serialize};

use crate::decide::{decisions_for, RunIndex};
use crate::error::{HarnessError, Result};
use crate::plot::{error_bar_chart, Series};
use crate::spec::{ExperimentSpec, GridBlock, Selection};
use crate::store::{write_atomic, BaselineRecord, Store, StoredRun};

/// Test CER at the epoch each criterion picks, keyed by cell.
pub struct Outcomes<'a> {
    runs: &'a [StoredRun],
    index: RunIndex<'a>,
    spec: &'a ExperimentSpec,
}

impl<'a> Outcomes<'a> {
    pub fn new(runs: &'a [StoredRun], spec: &'a ExperimentSpec) -> Self {
        Outcomes { runs, index: RunIndex::new(runs), spec }
    }

    /// `(criterion, run) -> val_cer` at the scaled decision.
    pub fn test_cer(&self, criteria: &[Criterion], scale: f64) -> Result<BTreeMap<(Criterion, usize), f64>> {
        let mut out = BTreeMap::new();
        for (i, run) in self.runs.iter().enumerate() {
            for d in decisions_for(run, &self.index, criteria, self.spec.threshold_mode, scale)? {
                let row = run.trace.row(d.epoch).ok_or_else(|| HarnessError::Integrity(format!("{}: epoch {} missing", run.record.cell.key(), d.epoch)))?;
                out.insert((d.criterion, i), row.val_cer);
            }
        }
        Ok(out)
    }

    /// The results grid of one block and setup under `criterion`.
    pub fn grid(
        &self,
        cers: &BTreeMap<(Criterion, usize), f64>,
        baseline: &BaselineRecord,
        block: &GridBlock,
        setup: Setup,
        criterion: Criterion,
    ) -> Result<ResultsGrid> {
        let writers = block.writers.clone().unwrap_or_else(|| baseline.cer.keys().copied().collect());
        let mut g = ResultsGrid::new(block.levels.clone(), writers.clone(), block.n_series);
        for &w in &writers {
            let b = baseline.cer.get(&w).ok_or_else(|| HarnessError::Integrity(format!("no baseline CER for writer {w}")))?;
            g.set_baseline(w, *b)?;
        }
        for (i, run) in self.runs.iter().enumerate() {
            let c = run.record.cell;
            if c.selection != block.selection
                || c.setup != setup
                || !block.levels.contains(&c.level)
                || !writers.contains(&c.writer)
                || c.series >= block.n_series
            {
                continue;
            }
            if let Some(&v) = cers.get(&(criterion, i)) {
                g.insert(c.level, c.writer, c.series, v)?;
            }
        }
        g.check_complete()?;
        Ok(g)
    }
}

/// Per-writer relative improvement averaged over every level and series of
/// the grid, bootstrapped over writers.
pub fn pooled_summary(grid: &ResultsGrid, n_resamples: usize, seed: u64) -> Result<BootstrapSummary> {
    let mut per_writer = vec![0.0; grid.writers.len()];
    for &l in &grid.levels {
        for (acc, rel) in per_writer.iter_mut().zip(grid.relative_improvement(l)?) {
            *acc += rel / grid.levels.len() as f64;
        }
    }
    Ok(bootstrap_mean(&per_writer, n_resamples, seed::derive(seed, "pooled", 0))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Index of the grid block the row summarizes.
    pub block: usize,
    pub selection: Selection,
    pub setup: Setup,
    pub criterion: Criterion,
    pub level: usize,
    pub summary: BootstrapSummary,
}

/// Report CSV for one (selection, setup) slice.
pub fn report_csv(rows: &[&ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["level", "criterion", "mean", "ci_low", "ci_high"])?;
    for r in rows {
        w.write_record([
            r.level.to_string(),
            r.criterion.to_string(),
            r.summary.mean.to_string(),
            r.summary.ci_low.to_string(),
            r.summary.ci_high.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Spec(e.to_string()))
}

/// Per-level bootstrap summaries for every block, setup and criterion. With
/// the normalized statistic, each level is divided by `normalizer`'s mean
/// relative improvement in the same slice.
pub fn report_rows(
    store: &Store,
    spec: &ExperimentSpec,
    statistic: Statistic,
    normalizer: Option<Criterion>,
) -> Result<Vec<ReportRow>> {
    let runs = store.load_runs()?;
    let baseline = store.read_baseline()?;
    let out = Outcomes::new(&runs, spec);
    let mut criteria = spec.criteria.clone();
    if let Some(n) = normalizer {
        if !criteria.contains(&n) {
            criteria.push(n);
        }
    }
    let cers = out.test_cer(&criteria, 1.0)?;
    let seed = spec.bootstrap_seed();
    let mut rows = Vec::new();
    for (bi, block) in spec.blocks.iter().enumerate() {
        for &setup in &block.setups {
            let reference = match (statistic, normalizer) {
                (Statistic::NormalizedImprovement, Some(n)) => {
                    let g = out.grid(&cers, &baseline, block, setup, n)?;
                    let s = aggregate(&g, Statistic::RelativeImprovement, None, spec.bootstrap_resamples, seed)?;
                    Some(s.into_iter().map(|(l, s)| (l, s.mean)).collect::<BTreeMap<_, _>>())
                }
                (Statistic::NormalizedImprovement, None) => {
                    return Err(HarnessError::Spec("normalized improvement needs a normalizer criterion".into()))
                }
                _ => None,
            };
            for &criterion in &spec.criteria {
                let g = out.grid(&cers, &baseline, block, setup, criterion)?;
                for (level, summary) in aggregate(&g, statistic, reference.as_ref(), spec.bootstrap_resamples, seed)? {
                    rows.push(ReportRow { block: bi, selection: block.selection, setup, criterion, level, summary });
                }
            }
        }
    }
    Ok(rows)
}

fn statistic_name(s: Statistic) -> &'static str {
    match s {
        Statistic::RelativeImprovement => "relative",
        Statistic::NormalizedImprovement => "normalized",
    }
}

/// Writes `report/b<block>-<selection>-<setup>-<statistic>.{csv,svg}`;
/// returns the file stems written.
pub fn write_report(store: &Store, spec: &ExperimentSpec, statistic: Statistic, normalizer: Option<Criterion>) -> Result<Vec<String>> {
    let rows = report_rows(store, spec, statistic, normalizer)?;
    let mut slices: BTreeMap<(usize, Selection, Setup), Vec<&ReportRow>> = BTreeMap::new();
    for r in &rows {
        slices.entry((r.block, r.selection, r.setup)).or_default().push(r);
    }
    let mut written = Vec::new();
    for ((block, selection, setup), mut rs) in slices {
        rs.sort_by_key(|r| (r.criterion, r.level));
        let stem = format!("b{block}-{selection}-{setup}-{}", statistic_name(statistic));
        let dir = store.report_dir();
        write_atomic(&dir.join(format!("{stem}.csv")), &report_csv(&rs)?)?;
        let mut series: BTreeMap<Criterion, Vec<(f64, BootstrapSummary)>> = BTreeMap::new();
        for r in &rs {
            series.entry(r.criterion).or_default().push((r.level as f64, r.summary));
        }
        let series: Vec<Series> = series.into_iter().map(|(c, points)| Series { label: c.to_string(), points }).collect();
        let title = format!("{} improvement, {selection} selection, {setup}", statistic_name(statistic));
        let svg = error_bar_chart(&title, "fine-tuning lines", true, &series);
        write_atomic(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
        written.push(stem);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block: usize,
    pub selection: Selection,
    pub setup: Setup,
    pub criterion: Criterion,
    pub factor: f64,
    /// `None` pools every level of the block.
    pub level: Option<usize>,
    pub summary: BootstrapSummary,
}

/// Re-decides every run with each scale factor and bootstraps the relative
/// improvement at the scaled epochs. No run is retrained.
pub fn stability_sweep(store: &Store, spec: &ExperimentSpec, criteria: &[Criterion], factors: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(f) = factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(lineadapt::error::Error::BadScaleFactor(*f).into());
    }
    let runs = store.load_runs()?;
    let baseline = store.read_baseline()?;
    let out = Outcomes::new(&runs, spec);
    let seed = spec.bootstrap_seed();
    let mut rows = Vec::new();
    for &factor in factors {
        let cers = out.test_cer(criteria, factor)?;
        for (bi, block) in spec.blocks.iter().enumerate() {
            for &setup in &block.setups {
                for &criterion in criteria {
                    let g = out.grid(&cers, &baseline, block, setup, criterion)?;
                    let mut push = |level, summary| {
                        rows.push(SweepRow { block: bi, selection: block.selection, setup, criterion, factor, level, summary });
                    };
                    push(None, pooled_summary(&g, spec.bootstrap_resamples, seed)?);
                    for (l, s) in aggregate(&g, Statistic::RelativeImprovement, None, spec.bootstrap_resamples, seed)? {
                        push(Some(l), s);
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "selection", "setup", "criterion", "factor", "level", "mean", "ci_low", "ci_high"])?;
    for r in rows {
        w.write_record([
            r.block.to_string(),
            r.selection.to_string(),
            r.setup.to_string(),
            r.criterion.to_string(),
            r.factor.to_string(),
            r.level.map_or_else(|| "all".to_string(), |l| l.to_string()),
            r.summary.mean.to_string(),
            r.summary.ci_low.to_string(),
            r.summary.ci_high.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Spec(e.to_string()))
}

/// Writes `report/sweep.csv` and one pooled chart per slice.
pub fn write_sweep(store: &Store, rows: &[SweepRow]) -> Result<()> {
    let dir = store.report_dir();
    write_atomic(&dir.join("sweep.csv"), &sweep_csv(rows)?)?;
    let mut slices: BTreeMap<(usize, Selection, Setup), BTreeMap<Criterion, Vec<(f64, BootstrapSummary)>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.level.is_none()) {
        slices.entry((r.block, r.selection, r.setup)).or_default().entry(r.criterion).or_default().push((r.factor, r.summary));
    }
    for ((block, selection, setup), by_crit) in slices {
        let series: Vec<Series> = by_crit.into_iter().map(|(c, points)| Series { label: c.to_string(), points }).collect();
        let svg = error_bar_chart(&format!("stability, {selection} selection, {setup}"), "scale factor", false, &series);
        write_atomic(&dir.join(format!("sweep-b{block}-{selection}-{setup}.svg")), svg.as_bytes())?;
    }
    Ok(())
}
