//! Pretraining and fine-tuning loops with per-epoch measurement.

mod pretrain;
mod series;
mod trace;

pub use pretrain::{lr_at, pretrain, PretrainConfig, PretrainEpoch, PretrainReport};
pub use series::{build_series, SeriesPlan, DEFAULT_LEVELS};
pub use trace::{CurveKind, EpochRow, EpochTrace};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::image::LineImage;
use crate::model::{ComponentMask, Encoded, Recognizer, Setup};
use crate::nn::{AdamW, AdamWConfig, Param};
use crate::seed;
use crate::stats::edit_distance;

/// One training or evaluation line.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a LineImage,
    pub transcript: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mask: ComponentMask,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Batches hold `min(max_batch_size, n_lines)` lines.
    pub max_batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip over trainable parameters.
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mask: Setup::All.mask(),
            learning_rate: 5e-5,
            epochs: 80,
            max_batch_size: 32,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_every: 1,
            eval_batch_size: 32,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask.groups.is_empty() {
            return Err(Error::EmptyMask);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 || self.max_batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch sizes must be positive".into()));
        }
        if self.eval_every != 1 {
            return Err(Error::InvalidConfig("per-epoch evaluation is required (eval_every = 1)".into()));
        }
        self.augment.validate()
    }

    pub fn batch_size(&self, n_lines: usize) -> usize {
        self.max_batch_size.min(n_lines).max(1)
    }
}

/// Shuffled minibatches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, "epoch", epoch as u64));
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Loss and greedy-decode CER on a set of clean lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Token-weighted mean teacher-forced NLL.
    pub loss: f64,
    /// Total edits over total reference characters.
    pub cer: f64,
    /// Greedy transcripts in input order.
    pub hypotheses: Vec<String>,
}

/// A fixed evaluation set, batched by width. Encoder outputs can be reused
/// across calls while the encoder is frozen.
pub struct EvalSet<'a> {
    samples: Vec<Sample<'a>>,
    batches: Vec<Vec<usize>>,
    targets: Vec<Vec<u32>>,
    cache: Option<Vec<Encoded<f32>>>,
}

impl<'a> EvalSet<'a> {
    pub fn new(model: &Recognizer, samples: &[Sample<'a>], batch_size: usize) -> Result<Self> {
        let targets = samples.iter().map(|s| model.config.vocab.encode(s.transcript)).collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by_key(|&i| (samples[i].image.width, i));
        let batches = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        Ok(EvalSet { samples: samples.to_vec(), batches, targets, cache: None })
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Evaluates `model`. With `reuse_encoding`, encoder outputs from the
    /// first call are kept and reused; callers must only set it while the
    /// encoder-side parameters are frozen.
    pub fn evaluate(&mut self, model: &Recognizer, reuse_encoding: bool) -> Result<Evaluation> {
        if self.samples.is_empty() {
            return Ok(Evaluation { loss: f64::NAN, cer: f64::NAN, hypotheses: Vec::new() });
        }
        if !reuse_encoding {
            self.cache = None;
        }
        let mut hyps = vec![String::new(); self.samples.len()];
        let (mut nll, mut tokens, mut edits, mut chars) = (0.0, 0usize, 0usize, 0usize);
        let mut fresh = Vec::new();
        for (bi, idx) in self.batches.iter().enumerate() {
            let computed;
            let enc = match self.cache.as_ref() {
                Some(c) => &c[bi],
                None => {
                    let imgs: Vec<&LineImage> = idx.iter().map(|&i| self.samples[i].image).collect();
                    computed = model.encode(&model.batch(&imgs)?)?;
                    &computed
                }
            };
            let targets: Vec<Vec<u32>> = idx.iter().map(|&i| self.targets[i].clone()).collect();
            let tf = model.teacher_forced_encoded(enc, &targets)?;
            for lp in &tf.logprobs {
                nll -= lp.iter().sum::<f64>();
                tokens += lp.len();
            }
            for (&i, d) in idx.iter().zip(model.greedy_decode_encoded(enc, model.config.max_decode_len)) {
                let h: Vec<char> = d.text.chars().collect();
                let r: Vec<char> = self.samples[i].transcript.chars().collect();
                edits += edit_distance(&h, &r);
                chars += r.len();
                hyps[i] = d.text;
            }
            if reuse_encoding && self.cache.is_none() {
                fresh.push(enc.clone());
            }
        }
        if reuse_encoding && self.cache.is_none() {
            self.cache = Some(fresh);
        }
        Ok(Evaluation { loss: nll / tokens.max(1) as f64, cer: edits as f64 / chars.max(1) as f64, hypotheses: hyps })
    }
}

/// What the epoch callback asks the loop to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub trace: EpochTrace,
    /// Parameters after the last executed epoch.
    pub model: Recognizer,
    /// Epoch at which the callback stopped the run, if it did.
    pub stopped_at: Option<usize>,
}

fn clip_gradients(params: &mut [&mut Param<f32>], trainable: &[bool], max_norm: f64) {
    let sq: f64 = params
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .flat_map(|(p, _)| p.grad.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for (p, _) in params.iter_mut().zip(trainable).filter(|(_, &t)| t) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Fine-tunes a copy of `baseline` on `train`, evaluating on the clean
/// training lines and on `val` after every epoch. `on_epoch` sees each row
/// and the current model and may stop the run early.
pub fn finetune<F>(baseline: &Recognizer, cfg: &RunConfig, train: &[Sample], val: &[Sample], mut on_epoch: F) -> Result<FinetuneOutcome>
where
    F: FnMut(&EpochRow, &Recognizer) -> Control,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning needs at least one line".into()));
    }
    let mut model = baseline.clone();
    let trainable: Vec<bool> = model.params().iter().map(|p| cfg.mask.contains(p.group)).collect();
    let scope = Recognizer::scope_for(&cfg.mask);
    let targets = train.iter().map(|s| model.config.vocab.encode(s.transcript)).collect::<Result<Vec<_>>>()?;
    let n = train.len();
    let bs = cfg.batch_size(n);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, trainable.len());
    let mut train_eval = EvalSet::new(&model, train, cfg.eval_batch_size)?;
    let mut val_eval = EvalSet::new(&model, val, cfg.eval_batch_size)?;
    let reuse = !scope.encoder;
    let mut trace = EpochTrace { rows: Vec::with_capacity(cfg.epochs), batch_size: bs, aborted: false };
    let mut stopped_at = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let (mut nll, mut tokens) = (0.0, 0usize);
        for idx in epoch_batches(n, bs, cfg.seed, epoch) {
            let imgs: Vec<LineImage> = idx
                .iter()
                .map(|&i| augment(train[i].image, &cfg.augment, seed::derive(cfg.seed, "augment", (epoch * n + i) as u64)))
                .collect();
            let refs: Vec<&LineImage> = imgs.iter().collect();
            let batch_targets: Vec<Vec<u32>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let batch = model.batch(&refs)?;
            model.zero_grad();
            let tf = model.loss_and_grad(&batch, &batch_targets, scope)?;
            if !tf.loss.is_finite() {
                trace.aborted = true;
                break 'epochs;
            }
            let count: usize = batch_targets.iter().map(|t| t.len() + 1).sum();
            nll += tf.loss * count as f64;
            tokens += count;
            let mut params = model.params_mut();
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut params, &trainable, c);
            }
            opt.step(&mut params, &trainable, cfg.learning_rate);
        }
        let tr = train_eval.evaluate(&model, reuse)?;
        let va = val_eval.evaluate(&model, reuse)?;
        if !tr.loss.is_finite() {
            trace.aborted = true;
            break;
        }
        let row = EpochRow {
            epoch,
            train_loss_aug: nll / tokens as f64,
            train_loss_clean: tr.loss,
            train_cer_clean: tr.cer,
            val_loss: va.loss,
            val_cer: va.cer,
        };
        trace.rows.push(row);
        if on_epoch(&row, &model) == Control::Stop {
            stopped_at = Some(epoch);
            break;
        }
    }
    Ok(FinetuneOutcome { trace, model, stopped_at })
}
