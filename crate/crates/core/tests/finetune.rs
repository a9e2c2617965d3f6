use std::sync::OnceLock;

use lineadapt::charset::CharsetSpec;
use lineadapt::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use lineadapt::finetune::{epoch_batches, finetune, Control, RunConfig, Sample};
use lineadapt::model::{ModelConfig, Recognizer, Setup};
use lineadapt::nn::Group;
use proptest::prelude::*;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let spec = CorpusSpec { n_writers: 2, lines_per_writer: 512, n_source_writers: 0, max_chars: 8, ..CorpusSpec::default() };
        generate_corpus(&spec, &CharsetSpec::default()).unwrap()
    })
}

fn model() -> Recognizer {
    let mut cfg = ModelConfig::micro();
    cfg.max_decode_len = 12;
    Recognizer::new(cfg, 4).unwrap()
}

fn samples(split: Split, n: usize) -> Vec<Sample<'static>> {
    corpus().lines_of(0, split).into_iter().take(n).map(|l| Sample { image: &l.image, transcript: &l.transcript }).collect()
}

fn run_cfg(setup: Setup, epochs: usize) -> RunConfig {
    RunConfig { mask: setup.mask(), epochs, learning_rate: 1e-3, seed: 17, ..RunConfig::default() }
}

#[test]
fn shorter_runs_are_prefixes_of_longer_ones() {
    let base = model();
    let (train, val) = (samples(Split::FinetunePool, 6), samples(Split::TargetTest, 4));
    let long = finetune(&base, &run_cfg(Setup::All, 3), &train, &val, |_, _| Control::Continue).unwrap();
    let short = finetune(&base, &run_cfg(Setup::All, 2), &train, &val, |_, _| Control::Continue).unwrap();
    assert_eq!(long.trace.epochs(), 3);
    assert_eq!(short.trace.rows[..], long.trace.rows[..2]);
    let stopped = finetune(&base, &run_cfg(Setup::All, 3), &train, &val, |r, _| if r.epoch == 2 { Control::Stop } else { Control::Continue })
        .unwrap();
    assert_eq!(stopped.stopped_at, Some(2));
    assert_eq!(stopped.trace, short.trace);
    for (a, b) in stopped.model.params().iter().zip(short.model.params()) {
        assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
    for r in &long.trace.rows {
        let all = [r.train_loss_aug, r.train_loss_clean, r.train_cer_clean, r.val_loss, r.val_cer];
        assert!(all.iter().all(|v| v.is_finite() && *v >= 0.0), "{r:?}");
    }
}

#[test]
fn batches_hold_at_most_thirty_two_lines() {
    let base = model();
    for n in [5, 40] {
        let train = samples(Split::FinetunePool, n);
        let out = finetune(&base, &run_cfg(Setup::D, 1), &train, &[], |_, _| Control::Continue).unwrap();
        assert_eq!(out.trace.batch_size, n.min(32));
        assert!(out.trace.rows[0].val_cer.is_nan());
    }
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let base = model();
    let train = samples(Split::FinetunePool, 4);
    for setup in Setup::ALL_SETUPS {
        let out = finetune(&base, &run_cfg(setup, 2), &train, &[], |_, _| Control::Continue).unwrap();
        let mask = setup.mask();
        for g in Group::ALL {
            let same = out.model.group_fingerprint(g) == base.group_fingerprint(g);
            assert_eq!(same, !mask.contains(g), "{setup:?} {g:?}");
        }
    }
}

#[test]
fn bad_runs_are_rejected() {
    let base = model();
    let train = samples(Split::FinetunePool, 2);
    assert!(finetune(&base, &run_cfg(Setup::All, 1), &[], &[], |_, _| Control::Continue).is_err());
    let cfg = RunConfig { epochs: 0, ..run_cfg(Setup::All, 1) };
    assert!(finetune(&base, &cfg, &train, &[], |_, _| Control::Continue).is_err());
    let cfg = RunConfig { learning_rate: -1.0, ..run_cfg(Setup::All, 1) };
    assert!(finetune(&base, &cfg, &train, &[], |_, _| Control::Continue).is_err());
}

proptest! {
    #[test]
    fn epoch_batches_cover_every_line_once(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0usize..80) {
        let batches = epoch_batches(n, bs, seed, epoch);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(RunConfig::default().batch_size(n), n.min(32));
    }
}
