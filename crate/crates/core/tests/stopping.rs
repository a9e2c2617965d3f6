use lineadapt::finetune::{EpochRow, EpochTrace};
use lineadapt::stopping::{
    decide, estimate_epoch, normalize_by_min, scale_epoch, x4_folds, Criterion, DecideContext, Reference, ThresholdMode,
};
use proptest::prelude::*;

fn trace_from(rows: Vec<(f64, f64, f64, f64)>) -> EpochTrace {
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, (val_cer, val_loss, train_cer, loss))| EpochRow {
            epoch: i + 1,
            train_loss_aug: loss * 1.1,
            train_loss_clean: loss,
            train_cer_clean: train_cer,
            val_loss,
            val_cer,
        })
        .collect();
    EpochTrace { rows, batch_size: 8, aborted: false }
}

/// Values on a coarse grid so ties and exact zeros actually occur.
fn coarse(max: u32) -> impl Strategy<Value = f64> {
    (0..=max).prop_map(|v| v as f64 / 10.0)
}

fn trace(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = EpochTrace> {
    prop::collection::vec((coarse(10), coarse(30).prop_map(|v| v + 0.1), coarse(3), coarse(20).prop_map(|v| v + 0.05)), len)
        .prop_map(trace_from)
}

/// Brute force: average of min-normalized curves, earliest minimum.
fn estimate_oracle(curves: &[Vec<f64>]) -> usize {
    let len = curves.iter().map(Vec::len).min().unwrap();
    let norm: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| {
            let m = c[..len].iter().cloned().fold(f64::INFINITY, f64::min);
            let shift = if m == 0.0 { 1e-6 } else { 0.0 };
            c[..len].iter().map(|v| (v + shift) / (m + shift)).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..len).map(|i| norm.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect();
    let best = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    mean.iter().position(|&v| v == best).unwrap() + 1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scaled_epochs_round_half_up_and_clamp(base in 1usize..120, factor in 0.05f64..4.0, e in 1usize..120) {
        let got = scale_epoch(base, factor, e).unwrap();
        prop_assert!((1..=e).contains(&got));
        let raw = factor * base as f64;
        let rounded = if raw.fract() >= 0.5 { raw.ceil() } else { raw.floor() } as usize;
        prop_assert_eq!(got, rounded.clamp(1, e));
        prop_assert_eq!(scale_epoch(base.min(e), 1.0, e).unwrap(), base.min(e));
    }

    #[test]
    fn normalized_curves_have_unit_minimum(curve in prop::collection::vec(coarse(50), 1..40)) {
        let n = normalize_by_min(&curve);
        let min = n.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(min, 1.0);
        let arg = |c: &[f64]| c.iter().position(|&v| v == c.iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assert_eq!(arg(&n), arg(&curve));
    }

    #[test]
    fn epoch_estimates_match_brute_force(curves in prop::collection::vec(prop::collection::vec(coarse(40), 1..20), 1..5)) {
        prop_assert_eq!(estimate_epoch(&curves).unwrap(), estimate_oracle(&curves));
    }

    #[test]
    fn x4_folds_partition_the_lines(n in 0usize..300, seed in any::<u64>()) {
        let folds = x4_folds(n, seed);
        prop_assert_eq!(folds.len(), 4);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&folds, &x4_folds(n, seed));
    }

    #[test]
    fn the_oracle_is_a_lower_bound(
        target in trace(1..=30),
        refs in prop::collection::vec(trace(1..=30), 1..4),
        folds in prop::collection::vec(trace(1..=30), 4),
        factor in prop::sample::select(vec![0.5, 1.0, 1.5, 2.0]),
    ) {
        let references: Vec<Reference> = refs.iter().enumerate().map(|(i, t)| Reference { writer_id: i as u32, trace: t }).collect();
        let ctx = DecideContext { references: &references, threshold_mode: ThresholdMode::RecordedMean, x4_folds: Some(&folds) };
        let e = target.epochs();
        let cer = |ep: usize| target.rows[ep - 1].val_cer;
        let oracle = decide(Criterion::TstCer, &target, &ctx, 1.0).unwrap();
        for c in Criterion::ALL {
            let d = match decide(c, &target, &ctx, factor) {
                Ok(d) => d,
                // A reference set whose best-epoch losses are all zero has no usable threshold.
                Err(_) if c == Criterion::CfCer => continue,
                Err(err) => return Err(TestCaseError::fail(format!("{c}: {err}"))),
            };
            prop_assert!((1..=e).contains(&d.epoch), "{c}: {}", d.epoch);
            prop_assert!(cer(oracle.epoch) <= cer(d.epoch), "{c}");
            prop_assert_eq!(&d, &decide(c, &target, &ctx, factor).unwrap());
            if factor == 1.0 {
                prop_assert_eq!(d.epoch, d.base_epoch.min(e));
            }
        }
    }

    #[test]
    fn decisions_survive_a_csv_round_trip(t in trace(1..=30)) {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = EpochTrace::read_csv(buf.as_slice(), t.batch_size, t.aborted).unwrap();
        let ctx = DecideContext::default();
        for c in [Criterion::TstCer, Criterion::TrnCer, Criterion::Ep20] {
            let a = serde_json::to_vec(&decide(c, &t, &ctx, 1.0).unwrap()).unwrap();
            let b = serde_json::to_vec(&decide(c, &back, &ctx, 1.0).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn simple_rules_on_hand_computed_traces() {
    // (val_cer, val_loss, train_cer, train_loss)
    let t = trace_from(vec![
        (0.30, 1.2, 0.20, 0.90),
        (0.20, 0.9, 0.10, 0.50),
        (0.25, 0.8, 0.00, 0.30),
        (0.20, 0.7, 0.00, 0.20),
        (0.22, 0.6, 0.00, 0.10),
    ]);
    let refs_a = trace_from(vec![(4.0, 1.0, 0.0, 0.8), (2.0, 1.0, 0.0, 0.4), (1.0, 1.0, 0.0, 0.25), (2.0, 1.0, 0.0, 0.2)]);
    let refs_b = trace_from(vec![(8.0, 1.0, 0.0, 0.9), (2.0, 1.0, 0.0, 0.35), (4.0, 1.0, 0.0, 0.3), (6.0, 1.0, 0.0, 0.1)]);
    let references = [Reference { writer_id: 7, trace: &refs_a }, Reference { writer_id: 3, trace: &refs_b }];
    let ctx = DecideContext { references: &references, ..DecideContext::default() };
    let epoch = |c| decide(c, &t, &ctx, 1.0).unwrap().epoch;
    assert_eq!(epoch(Criterion::TstCer), 2);
    assert_eq!(epoch(Criterion::TrnCer), 3);
    assert_eq!(epoch(Criterion::Ep20), 5);
    // Normalized means: [3, 1.25, 1.5, 2.5] -> epoch 2.
    assert_eq!(epoch(Criterion::EpCer), 2);
    // tau = (0.25 + 0.35) / 2 = 0.3; the first loss at or below it is epoch 3.
    let cf = decide(Criterion::CfCer, &t, &ctx, 1.0).unwrap();
    assert_eq!((cf.epoch, cf.reference_writer_ids.clone()), (3, vec![3, 7]));
    assert!((cf.tau.unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(decide(Criterion::TrnCer, &t, &ctx, 1.5).unwrap().epoch, 5);
    assert_eq!(decide(Criterion::TrnCer, &t, &ctx, 0.5).unwrap().epoch, 2);
    assert!(decide(Criterion::X4, &t, &ctx, 1.0).is_err());
}
