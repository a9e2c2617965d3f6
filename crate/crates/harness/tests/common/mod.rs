#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lineadapt::charset::CharsetSpec;
use lineadapt::corpus::{generate_corpus, write_manifest, CorpusSpec};
use lineadapt::model::{save_checkpoint, CheckpointMeta, ModelConfig, Recognizer, Setup};
use lineadapt::stopping::Criterion;
use lineadapt_harness::grid::{run_grid, GridContext, GridSummary};
use lineadapt_harness::spec::{ExperimentSpec, GridBlock, RunTemplate, Selection};
use lineadapt_harness::store::Store;
use tempfile::TempDir;

/// Three target writers, no source writers, written once per test binary.
pub fn assets() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { n_writers: 3, lines_per_writer: 512, n_source_writers: 0, max_chars: 12, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec, &CharsetSpec::default()).unwrap();
        write_manifest(&corpus, &dir.path().join("corpus/manifest.jsonl")).unwrap();
        let model = Recognizer::new(ModelConfig::micro(), 3).unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), &dir.path().join("baseline.ckpt")).unwrap();
        dir
    })
    .path()
}

pub fn spec(blocks: Vec<GridBlock>, criteria: Vec<Criterion>) -> ExperimentSpec {
    ExperimentSpec {
        corpus: PathBuf::from("corpus/manifest.jsonl"),
        baseline: PathBuf::from("baseline.ckpt"),
        blocks,
        criteria,
        run: RunTemplate { epochs: 3, eval_batch_size: 64, ..RunTemplate::default() },
        seed: 11,
        bootstrap_resamples: 500,
        ..ExperimentSpec::default()
    }
}

pub fn random_block(setups: &[Setup], levels: &[usize]) -> GridBlock {
    GridBlock { selection: Selection::Random, setups: setups.to_vec(), levels: levels.to_vec(), writers: None, n_series: 1 }
}

/// Runs the grid into a fresh store.
pub fn run(spec: &ExperimentSpec, store: &Store) -> GridSummary {
    let mut ctx = GridContext::load(spec.clone(), assets()).unwrap();
    run_grid(&mut ctx, store, 2, None).unwrap()
}
