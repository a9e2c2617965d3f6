use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::image::LineImage;
use crate::model::{BackwardScope, ModelConfig, Recognizer};
use crate::nn::{AdamW, AdamWConfig};
use crate::seed;

use super::{clip_gradients, EvalSet, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Cosine decay floor as a fraction of `peak_lr`.
    pub min_lr_fraction: f64,
    /// Linear warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Desired CER on the pretraining test split.
    pub target_cer: f64,
    /// Cap on test lines evaluated after each epoch (0 = all).
    pub eval_lines: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::tiny(),
            epochs: 12,
            batch_size: 32,
            peak_lr: 1e-3,
            min_lr_fraction: 0.05,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            augment: AugmentConfig::default(),
            seed: 0,
            target_cer: 0.05,
            eval_lines: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_cer: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    pub steps: usize,
    pub train_lines: usize,
    /// CER over the full pretraining test split.
    pub final_test_cer: f64,
    pub reached_target: bool,
}

/// Learning rate at `step` of `total`: linear ramp from 0 reaching `peak`
/// exactly at `warmup`, then cosine decay to `peak * min_fraction`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64, min_fraction: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = peak * min_fraction;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Random batches of similar-width lines: shuffle, sort windows of eight
/// batches by width, cut, then shuffle the batch order.
fn bucketed_batches(widths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed, "pretrain-epoch", epoch as u64);
    let mut idx: Vec<usize> = (0..widths.len()).collect();
    idx.shuffle(&mut rng);
    let mut batches = Vec::new();
    for window in idx.chunks_mut(batch_size * 8) {
        window.sort_by_key(|&i| widths[i]);
        batches.extend(window.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Trains a fresh model on the corpus's pretraining split. A model is
/// returned even when the target CER is missed; the report says so.
pub fn pretrain<F>(cfg: &PretrainConfig, corpus: &Corpus, mut progress: F) -> Result<(Recognizer, PretrainReport)>
where
    F: FnMut(&PretrainEpoch),
{
    let train: Vec<Sample> =
        corpus.split(Split::PretrainTrain).map(|l| Sample { image: &l.image, transcript: &l.transcript }).collect();
    let test: Vec<Sample> =
        corpus.split(Split::PretrainTest).map(|l| Sample { image: &l.image, transcript: &l.transcript }).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidConfig("corpus has no pretraining lines".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.warmup_fraction) {
        return Err(Error::InvalidConfig("invalid pretraining schedule".into()));
    }
    cfg.augment.validate()?;
    let mut model = Recognizer::new(cfg.model.clone(), seed::derive(cfg.seed, "init", 0))?;
    let targets = train.iter().map(|s| model.config.vocab.encode(s.transcript)).collect::<Result<Vec<_>>>()?;
    let widths: Vec<usize> = train.iter().map(|s| s.image.width).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (total as f64 * cfg.warmup_fraction).round() as usize;
    let n_params = model.params().len();
    let trainable = vec![true; n_params];
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, n_params);
    let probe = if cfg.eval_lines == 0 { &test[..] } else { &test[..cfg.eval_lines.min(test.len())] };
    let mut probe_set = EvalSet::new(&model, probe, 32)?;
    let mut report = PretrainReport {
        epochs: Vec::new(),
        steps: 0,
        train_lines: train.len(),
        final_test_cer: f64::NAN,
        reached_target: false,
    };
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        let (mut nll, mut tokens) = (0.0, 0usize);
        for idx in bucketed_batches(&widths, cfg.batch_size, cfg.seed, epoch) {
            let imgs: Vec<LineImage> = idx
                .iter()
                .map(|&i| augment(train[i].image, &cfg.augment, seed::derive(cfg.seed, "pretrain-augment", (epoch * train.len() + i) as u64)))
                .collect();
            let refs: Vec<&LineImage> = imgs.iter().collect();
            let bt: Vec<Vec<u32>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let batch = model.batch(&refs)?;
            model.zero_grad();
            let tf = model.loss_and_grad(&batch, &bt, BackwardScope::FULL)?;
            if !tf.loss.is_finite() {
                return Err(Error::Trace(format!("pretraining diverged at step {step}")));
            }
            let count: usize = bt.iter().map(|t| t.len() + 1).sum();
            nll += tf.loss * count as f64;
            tokens += count;
            let mut params = model.params_mut();
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut params, &trainable, c);
            }
            opt.step(&mut params, &trainable, lr_at(step, total, warmup, cfg.peak_lr, cfg.min_lr_fraction));
            step += 1;
        }
        let ev = probe_set.evaluate(&model, false)?;
        let e = PretrainEpoch {
            epoch,
            train_loss: nll / tokens.max(1) as f64,
            test_loss: ev.loss,
            test_cer: ev.cer,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {epoch}/{}: train loss {:.4}, test loss {:.4}, test CER {:.4} ({:.0}s)",
            cfg.epochs,
            e.train_loss,
            e.test_loss,
            e.test_cer,
            e.seconds
        );
        progress(&e);
        report.epochs.push(e);
    }
    report.steps = step;
    let full = EvalSet::new(&model, &test, 32)?.evaluate(&model, false)?;
    report.final_test_cer = full.cer;
    report.reached_target = full.cer <= cfg.target_cer;
    if !report.reached_target {
        log::warn!("pretraining missed target CER {:.3}: final test CER {:.4}", cfg.target_cer, full.cer);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_from_zero_to_peak() {
        let (total, warmup, peak) = (1000, 50, 1e-3);
        assert_eq!(lr_at(0, total, warmup, peak, 0.1), 0.0);
        assert_eq!(lr_at(warmup, total, warmup, peak, 0.1), peak);
        assert!((lr_at(25, total, warmup, peak, 0.1) - peak / 2.0).abs() < 1e-15);
        assert!((lr_at(total, total, warmup, peak, 0.1) - peak * 0.1).abs() < 1e-15);
    }

    #[test]
    fn buckets_cover_every_line_once() {
        let widths: Vec<usize> = (0..100).map(|i| (i * 37) % 91).collect();
        let mut seen: Vec<usize> = bucketed_batches(&widths, 8, 1, 1).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }
}
