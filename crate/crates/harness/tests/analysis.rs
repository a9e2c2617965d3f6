mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use common::{random_block, run, spec};
use lineadapt::model::Setup;
use lineadapt::stats::Statistic;
use lineadapt::stopping::{Criterion, StoppingDecision};
use lineadapt_harness::analysis::{report_rows, stability_sweep, sweep_csv, write_report, write_sweep};
use lineadapt_harness::decide::{decide_all, verify_store};
use lineadapt_harness::spec::ExperimentSpec;
use lineadapt_harness::store::Store;
use tempfile::TempDir;

/// One completed, decided store with three writers, two levels and two
/// series, shared by the read-only tests.
fn decided() -> &'static (TempDir, ExperimentSpec) {
    static STORE: OnceLock<(TempDir, ExperimentSpec)> = OnceLock::new();
    STORE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut block = random_block(&[Setup::All], &[2, 4]);
        block.n_series = 2;
        let spec = spec(vec![block], Criterion::ALL.to_vec());
        let store = Store::new(dir.path());
        run(&spec, &store);
        assert_eq!(decide_all(&store, &spec).unwrap(), 12);
        (dir, spec)
    })
}

fn store() -> Store {
    Store::new(decided().0.path())
}

/// A private copy of the shared store for tests that modify it.
fn copy_store() -> (TempDir, Store) {
    fn copy(from: &Path, to: &Path) {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            if e.file_type().unwrap().is_dir() {
                copy(&e.path(), &to.join(e.file_name()));
            } else {
                fs::copy(e.path(), to.join(e.file_name())).unwrap();
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    copy(decided().0.path(), dir.path());
    let s = Store::new(dir.path());
    (dir, s)
}

fn decisions(dir: &Path) -> Vec<StoppingDecision> {
    serde_json::from_slice(&fs::read(dir.join("decision.json")).unwrap()).unwrap()
}

#[test]
fn reference_criteria_use_exactly_the_other_writers() {
    for run in store().load_runs().unwrap() {
        let me = run.record.cell.writer;
        for d in decisions(&run.dir) {
            if d.criterion.needs_references() {
                assert_eq!(d.reference_writer_ids.len(), 2, "{:?}", d);
                assert!(!d.reference_writer_ids.contains(&me));
            } else {
                assert!(d.reference_writer_ids.is_empty());
            }
            assert!((1..=run.trace.epochs()).contains(&d.epoch));
        }
    }
}

#[test]
fn the_oracle_bounds_every_other_criterion() {
    for run in store().load_runs().unwrap() {
        let ds = decisions(&run.dir);
        assert_eq!(ds.len(), Criterion::ALL.len());
        let cer = |d: &StoppingDecision| run.trace.row(d.epoch).unwrap().val_cer;
        let oracle = ds.iter().find(|d| d.criterion == Criterion::TstCer).unwrap();
        for d in &ds {
            assert!(cer(oracle) <= cer(d), "{:?} beats the oracle", d.criterion);
        }
    }
}

#[test]
fn verification_accepts_the_store_and_flags_tampering() {
    assert_eq!(verify_store(&store()).unwrap(), 12);

    let (_dir, s) = copy_store();
    let runs = s.load_runs().unwrap();
    let path = runs[3].dir.join("decision.json");
    let mut ds = decisions(&runs[3].dir);
    ds[0].epoch = if ds[0].epoch == 1 { 2 } else { 1 };
    fs::write(&path, serde_json::to_vec_pretty(&ds).unwrap()).unwrap();
    let err = verify_store(&s).unwrap_err();
    assert!(err.is_integrity(), "{err}");
    assert!(err.to_string().contains(&runs[3].record.cell.key()));

    fs::remove_file(&path).unwrap();
    assert!(verify_store(&s).unwrap_err().is_integrity());

    // Editing a trace invalidates the stored decisions computed from it.
    let (_dir, s) = copy_store();
    let dir = &s.load_runs().unwrap()[0].dir;
    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    let mut lines: Vec<String> = trace.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[1].split(',').map(String::from).collect();
    *cols.last_mut().unwrap() = "0".into();
    lines[1] = cols.join(",");
    fs::write(dir.join("trace.csv"), lines.join("\n") + "\n").unwrap();
    assert!(verify_store(&s).unwrap_err().is_integrity());
}

#[test]
fn deciding_twice_is_byte_identical() {
    let (_dir, s) = copy_store();
    let spec = s.read_spec().unwrap();
    let read_all = || -> Vec<Vec<u8>> { s.load_runs().unwrap().iter().map(|r| fs::read(r.dir.join("decision.json")).unwrap()).collect() };
    let before = read_all();
    decide_all(&s, &spec).unwrap();
    assert_eq!(read_all(), before);
    let thresholds: Vec<_> = fs::read_dir(s.root.join("thresholds")).unwrap().collect();
    assert_eq!(thresholds.len(), 3);
}

#[test]
fn report_csv_has_the_fixed_schema() {
    let (_dir, s) = copy_store();
    let spec = s.read_spec().unwrap();
    let stems = write_report(&s, &spec, Statistic::RelativeImprovement, None).unwrap();
    assert_eq!(stems, vec!["b0-random-ALL-relative"]);
    let csv = fs::read_to_string(s.report_dir().join("b0-random-ALL-relative.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,criterion,mean,ci_low,ci_high"));
    assert_eq!(lines.count(), 2 * Criterion::ALL.len());
    let svg = fs::read_to_string(s.report_dir().join("b0-random-ALL-relative.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("EP_CER"));
}

#[test]
fn reports_are_deterministic_and_bracket_their_means() {
    let spec = &decided().1;
    let a = report_rows(&store(), spec, Statistic::RelativeImprovement, None).unwrap();
    let b = report_rows(&store(), spec, Statistic::RelativeImprovement, None).unwrap();
    assert_eq!(a, b);
    for r in &a {
        assert!(r.summary.ci_low <= r.summary.mean && r.summary.mean <= r.summary.ci_high, "{r:?}");
    }
}

#[test]
fn normalizing_by_a_criterion_gives_it_unit_improvement() {
    let spec = &decided().1;
    let rows = report_rows(&store(), spec, Statistic::NormalizedImprovement, Some(Criterion::TstCer)).unwrap();
    let oracle: Vec<_> = rows.iter().filter(|r| r.criterion == Criterion::TstCer).collect();
    assert_eq!(oracle.len(), 2);
    for r in oracle {
        assert!((r.summary.mean - 1.0).abs() < 1e-9, "{r:?}");
    }
    assert!(report_rows(&store(), spec, Statistic::NormalizedImprovement, None).is_err());
}

#[test]
fn the_unit_scale_sweep_matches_the_report() {
    let spec = &decided().1;
    let criteria = [Criterion::EpCer, Criterion::CfCer];
    let sweep = stability_sweep(&store(), spec, &criteria, &[0.5, 1.0, 2.0]).unwrap();
    // Per factor and criterion: one pooled row plus one per level.
    assert_eq!(sweep.len(), 3 * 2 * 3);
    let report: BTreeMap<(Criterion, usize), f64> = report_rows(&store(), spec, Statistic::RelativeImprovement, None)
        .unwrap()
        .into_iter()
        .map(|r| ((r.criterion, r.level), r.summary.mean))
        .collect();
    for r in sweep.iter().filter(|r| r.factor == 1.0) {
        if let Some(l) = r.level {
            assert!((report[&(r.criterion, l)] - r.summary.mean).abs() < 1e-12);
        }
    }
    let csv = String::from_utf8(sweep_csv(&sweep).unwrap()).unwrap();
    assert!(csv.starts_with("block,selection,setup,criterion,factor,level,mean,ci_low,ci_high\n"));
    assert!(csv.contains(",all,"));
    assert!(stability_sweep(&store(), spec, &criteria, &[0.0]).is_err());

    let (_dir, s) = copy_store();
    write_sweep(&s, &sweep).unwrap();
    assert!(s.report_dir().join("sweep.csv").is_file());
    assert!(s.report_dir().join("sweep-b0-random-ALL.svg").is_file());
}

#[test]
fn aggregation_refuses_an_incomplete_grid() {
    let mut spec = decided().1.clone();
    spec.blocks[0].levels.push(8);
    let err = report_rows(&store(), &spec, Statistic::RelativeImprovement, None).unwrap_err();
    assert!(err.to_string().contains("missing") || err.to_string().contains("incomplete"), "{err}");
}
