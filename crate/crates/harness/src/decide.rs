//! Stopping decisions over the store with leave-one-writer-out references.

use std::collections::BTreeMap;
use std::fs;

use lineadapt::model::Setup;
use lineadapt::stopping::{decide, estimate_threshold, Criterion, DecideContext, Reference, StoppingDecision, ThresholdMode, ThresholdTable};

use crate::error::{HarnessError, Result};
use crate::spec::{ExperimentSpec, Selection};
use crate::store::{json_bytes, write_atomic, write_json, Store, StoredRun};

/// Runs grouped by (selection, setup, level); references come from the same
/// group.
pub struct RunIndex<'a> {
    groups: BTreeMap<(Selection, Setup, usize), Vec<&'a StoredRun>>,
}

impl<'a> RunIndex<'a> {
    pub fn new(runs: &'a [StoredRun]) -> Self {
        let mut groups: BTreeMap<_, Vec<&StoredRun>> = BTreeMap::new();
        for r in runs {
            groups.entry(r.record.cell.slot()).or_default().push(r);
        }
        RunIndex { groups }
    }

    /// Traces of every other writer in the run's group.
    pub fn references(&self, run: &StoredRun) -> Vec<Reference<'a>> {
        let cell = run.record.cell;
        self.groups
            .get(&cell.slot())
            .into_iter()
            .flatten()
            .filter(|r| r.record.cell.writer != cell.writer)
            .map(|r| Reference { writer_id: r.record.cell.writer, trace: &r.trace })
            .collect()
    }
}

/// Decisions for one run at `scale`, in the order of `criteria`.
pub fn decisions_for(
    run: &StoredRun,
    index: &RunIndex,
    criteria: &[Criterion],
    mode: ThresholdMode,
    scale: f64,
) -> Result<Vec<StoppingDecision>> {
    let refs = index.references(run);
    let ctx = DecideContext { references: &refs, threshold_mode: mode, x4_folds: Some(run.folds.as_deref().unwrap_or(&[])) };
    criteria
        .iter()
        .map(|&c| {
            decide(c, &run.trace, &ctx, scale)
                .map_err(|e| HarnessError::Spec(format!("{}: {c}: {e}", run.record.cell.key())))
        })
        .collect()
}

pub fn decision_bytes(decisions: &[StoppingDecision]) -> Vec<u8> {
    json_bytes(&decisions)
}

/// Threshold tables per left-out writer: for each group, τ(L) from the
/// other writers.
fn thresholds(index: &RunIndex, runs: &[StoredRun], mode: ThresholdMode) -> BTreeMap<String, ThresholdTable> {
    let mut out: BTreeMap<String, ThresholdTable> = BTreeMap::new();
    for run in runs {
        let c = run.record.cell;
        let refs = index.references(run);
        if let Ok(tau) = estimate_threshold(&refs, mode) {
            out.entry(format!("{}-{}-w{:04}", c.selection, c.setup, c.writer)).or_default().insert(c.level, tau);
        }
    }
    out
}

/// Writes `decision.json` for every stored run and the threshold tables.
/// Returns the number of runs decided.
pub fn decide_all(store: &Store, spec: &ExperimentSpec) -> Result<usize> {
    let runs = store.load_runs()?;
    let index = RunIndex::new(&runs);
    for run in &runs {
        let d = decisions_for(run, &index, &spec.criteria, spec.threshold_mode, 1.0)?;
        write_atomic(&run.dir.join("decision.json"), &decision_bytes(&d))?;
    }
    if spec.criteria.contains(&Criterion::CfCer) {
        for (name, table) in thresholds(&index, &runs, spec.threshold_mode) {
            write_json(&store.root.join("thresholds").join(format!("{name}.json")), &table)?;
        }
    }
    Ok(runs.len())
}

/// Recomputes every `decision.json` from the stored traces and compares
/// bytes. Returns the runs checked.
pub fn verify_store(store: &Store) -> Result<usize> {
    let spec = store.read_spec()?;
    let runs = store.load_runs()?;
    let index = RunIndex::new(&runs);
    let mut problems = Vec::new();
    for run in &runs {
        let path = run.dir.join("decision.json");
        let stored = match fs::read(&path) {
            Ok(b) => b,
            Err(_) => {
                problems.push(format!("{}: decision.json missing", run.record.cell.key()));
                continue;
            }
        };
        let fresh = decision_bytes(&decisions_for(run, &index, &spec.criteria, spec.threshold_mode, 1.0)?);
        if stored != fresh {
            problems.push(format!("{}: decision.json differs from its recomputation", run.record.cell.key()));
        }
    }
    if problems.is_empty() {
        Ok(runs.len())
    } else {
        Err(HarnessError::Integrity(problems.join("; ")))
    }
}
