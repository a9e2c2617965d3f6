mod common;

use std::fs;

use common::{assets, random_block, run, spec};
use lineadapt::model::Setup;
use lineadapt::stopping::{Criterion, X4_FOLDS};
use lineadapt_harness::grid::{GridContext, GridSummary};
use lineadapt_harness::spec::{GridBlock, Selection};
use lineadapt_harness::store::{fold_path, Store};

#[test]
fn every_cell_runs_once_and_interrupted_runs_resume() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path().join("store"));
    let spec = spec(vec![random_block(&[Setup::All, Setup::D], &[2, 3])], vec![Criterion::TrnCer, Criterion::Ep20]);

    assert_eq!(run(&spec, &store), GridSummary { executed: 12, skipped: 0 });
    let runs = store.load_runs().unwrap();
    assert_eq!(runs.len(), 12);
    assert!(runs.iter().all(|r| r.trace.epochs() == 3 && r.folds.is_none()));
    assert_eq!(run(&spec, &store), GridSummary { executed: 0, skipped: 12 });

    // A run killed before status.json was written is redone, and the
    // redone trace is byte-identical.
    let victim = runs[5].dir.clone();
    let before = fs::read(victim.join("trace.csv")).unwrap();
    fs::remove_file(victim.join("status.json")).unwrap();
    assert_eq!(run(&spec, &store), GridSummary { executed: 1, skipped: 11 });
    assert_eq!(fs::read(victim.join("trace.csv")).unwrap(), before);

    fs::remove_file(runs[0].dir.join("trace.csv")).unwrap();
    assert_eq!(run(&spec, &store).executed, 1);

    let mut changed = spec.clone();
    changed.run.learning_rate *= 2.0;
    assert_eq!(run(&changed, &store), GridSummary { executed: 12, skipped: 0 });
}

#[test]
fn run_records_capture_the_training_subset() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path().join("store"));
    let mut spec = spec(vec![random_block(&[Setup::All], &[2, 4])], vec![Criterion::X4]);
    spec.blocks[0].writers = Some(vec![0]);
    run(&spec, &store);
    let runs = store.load_runs().unwrap();
    assert_eq!(runs.len(), 2);
    let (small, large) = (&runs[0], &runs[1]);
    assert_eq!(small.record.cell.level, 2);
    // Series are nested: the 2-line subset prefixes the 4-line one.
    assert_eq!(small.record.train_line_ids[..], large.record.train_line_ids[..2]);
    assert!(large.record.train_line_ids.iter().all(|id| id.starts_with("w0000-")));
    assert_eq!(small.record.val_lines, 256);
    // X4 folds exist only from four lines on.
    assert!(!small.record.x4 && !fold_path(&small.dir, 0).exists());
    assert!(large.record.x4);
    assert_eq!(large.folds.as_ref().unwrap().len(), X4_FOLDS);
    assert!((0..X4_FOLDS).all(|k| fold_path(&large.dir, k).is_file()));
}

#[test]
fn active_selection_trains_on_the_least_confident_lines() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path().join("store"));
    let block = GridBlock { selection: Selection::Active, setups: vec![Setup::D], levels: vec![3], writers: Some(vec![1]), n_series: 1 };
    let spec = spec(vec![block], vec![Criterion::TrnCer]);
    run(&spec, &store);
    let mut rdr = csv::Reader::from_path(store.scores_path(1)).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["line_id", "score"]);
    let mut scores: Vec<(f64, String)> =
        rdr.records().map(|r| r.unwrap()).map(|r| (r[1].parse().unwrap(), r[0].to_string())).collect();
    assert_eq!(scores.len(), 256);
    scores.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let expected: Vec<String> = scores.into_iter().take(3).map(|(_, id)| id).collect();
    let runs = store.load_runs().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].record.train_line_ids, expected);
}

#[test]
fn an_invalid_spec_is_rejected_before_any_work() {
    let mut s = spec(vec![random_block(&[Setup::All], &[0])], vec![Criterion::TrnCer]);
    assert!(GridContext::load(s.clone(), assets()).is_err());
    s.blocks[0].levels = vec![2];
    s.scale_factors = vec![1.0, -0.5];
    assert!(GridContext::load(s, assets()).is_err());
}
