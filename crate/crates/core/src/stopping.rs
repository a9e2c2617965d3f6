//! Stopping criteria: pure decisions over epoch traces.
//!
//! Every criterion yields a base epoch that is then scaled by a factor,
//! rounded half-up and clamped to the trace length. Ties between epochs
//! always resolve to the earliest one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{finetune, Control, CurveKind, EpochTrace, RunConfig, Sample};
use crate::model::Recognizer;
use crate::seed;

/// Added to a curve whose minimum is zero before normalizing by it.
pub const EPSILON: f64 = 1e-6;
/// Base epoch of the fixed criterion.
pub const FIXED_EPOCH: usize = 20;
pub const X4_FOLDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "TST_CER")]
    TstCer,
    #[serde(rename = "TRN_CER")]
    TrnCer,
    #[serde(rename = "X4")]
    X4,
    #[serde(rename = "EP_CER")]
    EpCer,
    #[serde(rename = "EP_LOSS")]
    EpLoss,
    #[serde(rename = "EP_20")]
    Ep20,
    #[serde(rename = "CF_CER")]
    CfCer,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::TstCer,
        Criterion::TrnCer,
        Criterion::X4,
        Criterion::EpCer,
        Criterion::EpLoss,
        Criterion::Ep20,
        Criterion::CfCer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::TstCer => "TST_CER",
            Criterion::TrnCer => "TRN_CER",
            Criterion::X4 => "X4",
            Criterion::EpCer => "EP_CER",
            Criterion::EpLoss => "EP_LOSS",
            Criterion::Ep20 => "EP_20",
            Criterion::CfCer => "CF_CER",
        }
    }

    /// Needs the target writer's test curve.
    pub fn is_oracle(self) -> bool {
        self == Criterion::TstCer
    }

    /// Estimated from other writers' traces.
    pub fn needs_references(self) -> bool {
        matches!(self, Criterion::EpCer | Criterion::EpLoss | Criterion::CfCer)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown criterion {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingDecision {
    pub criterion: Criterion,
    /// Chosen epoch after scaling, in `1..=E`.
    pub epoch: usize,
    /// Epoch before scaling.
    pub base_epoch: usize,
    pub scale_factor: f64,
    /// Loss threshold (CF_CER only).
    pub tau: Option<f64>,
    /// Writers whose traces informed the estimate.
    pub reference_writer_ids: Vec<u32>,
    /// The criterion's condition was never met, or it could not be applied,
    /// and its fallback rule chose the epoch.
    pub fallback: bool,
}

/// Loss thresholds per line count.
pub type ThresholdTable = BTreeMap<usize, f64>;

/// `clamp(round_half_up(factor * base), 1, epochs)`.
pub fn scale_epoch(base: usize, factor: f64, epochs: usize) -> Result<usize> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::BadScaleFactor(factor));
    }
    let scaled = (factor * base as f64 + 0.5).floor();
    Ok((scaled.max(1.0) as usize).min(epochs.max(1)))
}

/// 1-based index of the smallest value, earliest on ties. NaN never wins.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Divides a curve by its minimum. A zero minimum shifts the whole curve by
/// [`EPSILON`] first.
pub fn normalize_by_min(curve: &[f64]) -> Vec<f64> {
    let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        curve.iter().map(|v| (v + EPSILON) / EPSILON).collect()
    } else {
        curve.iter().map(|v| v / min).collect()
    }
}

/// Argmin of the pointwise mean of min-normalized curves. Curves of unequal
/// length are compared over their common prefix.
pub fn estimate_epoch(curves: &[Vec<f64>]) -> Result<usize> {
    let len = curves.iter().map(Vec::len).min().ok_or(Error::EmptyReferenceSet)?;
    if len == 0 {
        return Err(Error::Trace("reference curve is empty".into()));
    }
    let mut mean = vec![0.0; len];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(normalize_by_min(&c[..len])) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= curves.len() as f64);
    argmin(&mean).ok_or_else(|| Error::Trace("reference curves have no finite values".into()))
}

/// One reference writer's trace at the target's line count.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub writer_id: u32,
    pub trace: &'a EpochTrace,
}

fn reference_ids(refs: &[Reference]) -> Vec<u32> {
    let mut ids: Vec<u32> = refs.iter().map(|r| r.writer_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// The loss a reference trace recorded at its minimal validation CER.
fn loss_at_best(trace: &EpochTrace) -> Result<f64> {
    let e = argmin(&trace.curve(CurveKind::ValCer))
        .ok_or_else(|| Error::Trace("reference trace has no validation CER".into()))?;
    Ok(trace.rows[e - 1].train_loss_clean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Mean of each reference's clean-train loss at its best validation epoch.
    #[default]
    RecordedMean,
    /// Mean clean-train loss of the references at the epoch chosen from
    /// their averaged, min-normalized validation CER curves.
    CurveAverage,
}

pub fn estimate_threshold(refs: &[Reference], mode: ThresholdMode) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    let tau = match mode {
        ThresholdMode::RecordedMean => {
            refs.iter().map(|r| loss_at_best(r.trace)).sum::<Result<f64>>()? / refs.len() as f64
        }
        ThresholdMode::CurveAverage => {
            let curves: Vec<Vec<f64>> = refs.iter().map(|r| r.trace.curve(CurveKind::ValCer)).collect();
            let e = estimate_epoch(&curves)?;
            refs.iter().map(|r| r.trace.rows[e - 1].train_loss_clean).sum::<f64>() / refs.len() as f64
        }
    };
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Trace(format!("estimated threshold {tau} is not positive")));
    }
    Ok(tau)
}

fn trace_len(trace: &EpochTrace) -> Result<usize> {
    match trace.epochs() {
        0 => Err(Error::Trace("trace has no epochs".into())),
        e => Ok(e),
    }
}

fn decision(criterion: Criterion, base: usize, scale: f64, epochs: usize) -> Result<StoppingDecision> {
    Ok(StoppingDecision {
        criterion,
        epoch: scale_epoch(base, scale, epochs)?,
        base_epoch: base,
        scale_factor: scale,
        tau: None,
        reference_writer_ids: Vec::new(),
        fallback: false,
    })
}

/// Oracle: best epoch on the test curve.
pub fn tst_cer(trace: &EpochTrace, scale: f64) -> Result<StoppingDecision> {
    let e = trace_len(trace)?;
    let base = argmin(&trace.curve(CurveKind::ValCer)).ok_or_else(|| Error::OracleOnly(Criterion::TstCer.name().into()))?;
    decision(Criterion::TstCer, base, scale, e)
}

/// First epoch with zero CER on the clean fine-tuning lines, else the last.
pub fn trn_cer(trace: &EpochTrace, scale: f64) -> Result<StoppingDecision> {
    let e = trace_len(trace)?;
    let hit = trace.rows.iter().position(|r| r.train_cer_clean == 0.0).map(|i| i + 1);
    let mut d = decision(Criterion::TrnCer, hit.unwrap_or(e), scale, e)?;
    d.fallback = hit.is_none();
    Ok(d)
}

pub fn ep20(trace: &EpochTrace, scale: f64) -> Result<StoppingDecision> {
    let e = trace_len(trace)?;
    decision(Criterion::Ep20, FIXED_EPOCH.min(e), scale, e)
}

/// EP_CER or EP_LOSS from reference writers' validation curves.
pub fn ep_estimate(trace: &EpochTrace, criterion: Criterion, refs: &[Reference], scale: f64) -> Result<StoppingDecision> {
    let kind = match criterion {
        Criterion::EpCer => CurveKind::ValCer,
        Criterion::EpLoss => CurveKind::ValLoss,
        other => return Err(Error::InvalidConfig(format!("{other} is not an epoch estimator"))),
    };
    let e = trace_len(trace)?;
    let curves: Vec<Vec<f64>> = refs.iter().map(|r| r.trace.curve(kind)).collect();
    let base = estimate_epoch(&curves)?;
    let mut d = decision(criterion, base, scale, e)?;
    d.reference_writer_ids = reference_ids(refs);
    Ok(d)
}

/// First epoch whose clean-train loss is at or below `tau`, else the last.
pub fn cf_cer(trace: &EpochTrace, tau: f64, scale: f64) -> Result<StoppingDecision> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("threshold must be positive, got {tau}")));
    }
    let e = trace_len(trace)?;
    let hit = trace.rows.iter().position(|r| r.train_loss_clean <= tau).map(|i| i + 1);
    let mut d = decision(Criterion::CfCer, hit.unwrap_or(e), scale, e)?;
    d.tau = Some(tau);
    d.fallback = hit.is_none();
    Ok(d)
}

/// Splits `0..n` into four disjoint folds whose sizes differ by at most one.
pub fn x4_folds(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, "x4-folds", n as u64));
    let mut folds = vec![Vec::new(); X4_FOLDS];
    for (k, i) in idx.into_iter().enumerate() {
        folds[k % X4_FOLDS].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    folds
}

/// X4 from the fold runs' validation CER curves. The chosen epoch count
/// applies to a fresh fine-tuning on all lines; since the loop is
/// deterministic per epoch, that run equals the prefix of `trace`.
pub fn x4_from_folds(trace: &EpochTrace, folds: &[EpochTrace], scale: f64) -> Result<StoppingDecision> {
    if folds.is_empty() {
        let mut d = trn_cer(trace, scale)?;
        d.criterion = Criterion::X4;
        d.fallback = true;
        return Ok(d);
    }
    let e = trace_len(trace)?;
    decision(Criterion::X4, x4_base_epoch(folds)?, scale, e)
}

/// Epoch minimizing the fold runs' mean held-out CER.
pub fn x4_base_epoch(folds: &[EpochTrace]) -> Result<usize> {
    let curves: Vec<Vec<f64>> = folds.iter().map(|f| f.curve(CurveKind::ValCer)).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let mut mean = vec![0.0; len];
    for c in &curves {
        mean.iter_mut().zip(c).for_each(|(m, v)| *m += v / curves.len() as f64);
    }
    argmin(&mean).ok_or_else(|| Error::Trace("fold curves have no finite values".into()))
}

/// Runs the four cross-validation fine-tunings. Returns no folds (and the
/// decision falls back to TRN_CER) below four lines.
pub fn run_x4_folds(baseline: &Recognizer, cfg: &RunConfig, lines: &[Sample]) -> Result<Vec<EpochTrace>> {
    if lines.len() < X4_FOLDS {
        log::warn!("X4 needs at least {X4_FOLDS} lines, got {}; falling back to TRN_CER", lines.len());
        return Ok(Vec::new());
    }
    let folds = x4_folds(lines.len(), cfg.seed);
    let mut traces = Vec::with_capacity(X4_FOLDS);
    for (k, fold) in folds.iter().enumerate() {
        let held: Vec<Sample> = fold.iter().map(|&i| lines[i]).collect();
        let train: Vec<Sample> = (0..lines.len()).filter(|i| !fold.contains(i)).map(|i| lines[i]).collect();
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = seed::derive(cfg.seed, "x4-fold", k as u64);
        traces.push(finetune(baseline, &fold_cfg, &train, &held, |_, _| Control::Continue)?.trace);
    }
    Ok(traces)
}

/// Inputs beyond the target trace that some criteria need.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecideContext<'a> {
    pub references: &'a [Reference<'a>],
    pub threshold_mode: ThresholdMode,
    pub x4_folds: Option<&'a [EpochTrace]>,
}

pub fn decide(criterion: Criterion, trace: &EpochTrace, ctx: &DecideContext, scale: f64) -> Result<StoppingDecision> {
    match criterion {
        Criterion::TstCer => tst_cer(trace, scale),
        Criterion::TrnCer => trn_cer(trace, scale),
        Criterion::Ep20 => ep20(trace, scale),
        Criterion::EpCer | Criterion::EpLoss => ep_estimate(trace, criterion, ctx.references, scale),
        Criterion::CfCer => {
            let tau = estimate_threshold(ctx.references, ctx.threshold_mode)?;
            let mut d = cf_cer(trace, tau, scale)?;
            d.reference_writer_ids = reference_ids(ctx.references);
            Ok(d)
        }
        Criterion::X4 => {
            let folds = ctx.x4_folds.ok_or_else(|| Error::InvalidConfig("X4 needs its fold traces".into()))?;
            x4_from_folds(trace, folds, scale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::EpochRow;

    fn trace(val_cer: &[f64], train_cer: &[f64], loss: &[f64]) -> EpochTrace {
        let rows = (0..val_cer.len())
            .map(|i| EpochRow {
                epoch: i + 1,
                train_loss_aug: 1.0,
                train_loss_clean: loss[i],
                train_cer_clean: train_cer[i],
                val_loss: val_cer[i] * 2.0,
                val_cer: val_cer[i],
            })
            .collect();
        EpochTrace { rows, batch_size: 4, aborted: false }
    }

    #[test]
    fn worked_estimate() {
        let curves = vec![vec![4.0, 2.0, 1.0, 2.0], vec![8.0, 2.0, 4.0, 6.0]];
        assert_eq!(estimate_epoch(&curves).unwrap(), 2);
        assert_eq!(estimate_epoch(&[vec![3.0, 3.0, 3.0]]).unwrap(), 1);
        assert!(matches!(estimate_epoch(&[]), Err(Error::EmptyReferenceSet)));
    }

    #[test]
    fn zero_minimum_keeps_argmin() {
        let n = normalize_by_min(&[0.5, 0.0, 0.2]);
        assert_eq!(argmin(&n), Some(2));
        assert_eq!(n[1], 1.0);
    }

    #[test]
    fn scaling_rounds_half_up_and_clamps() {
        assert_eq!(scale_epoch(20, 1.5, 80).unwrap(), 30);
        assert_eq!(scale_epoch(3, 0.5, 80).unwrap(), 2);
        assert_eq!(scale_epoch(1, 0.1, 80).unwrap(), 1);
        assert_eq!(scale_epoch(70, 2.0, 80).unwrap(), 80);
        assert!(matches!(scale_epoch(5, 0.0, 80), Err(Error::BadScaleFactor(_))));
    }

    #[test]
    fn simple_rules() {
        let t = trace(&[5.0, 3.0, 4.0, 3.0], &[0.4, 0.1, 0.0, 0.0], &[0.9, 0.6, 0.4, 0.3]);
        assert_eq!(tst_cer(&t, 1.0).unwrap().epoch, 2);
        assert_eq!(trn_cer(&t, 1.0).unwrap().epoch, 3);
        assert_eq!(ep20(&t, 1.0).unwrap().epoch, 4);
        let cf = cf_cer(&t, 0.5, 1.0).unwrap();
        assert_eq!((cf.epoch, cf.fallback), (3, false));
        let never = cf_cer(&t, 0.01, 1.0).unwrap();
        assert_eq!((never.epoch, never.fallback), (4, true));
    }

    #[test]
    fn folds_are_balanced_partition() {
        let folds = x4_folds(10, 3);
        let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3, 3]);
        let mut all = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
    }
}
