//! Per-project state: uploaded lines, the annotation log, rounds and the
//! published checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use lineadapt::active::decode_by_width;
use lineadapt::finetune::EpochRow;
use lineadapt::image::LineImage;
use lineadapt::model::{ComponentMask, Recognizer};
use lineadapt::stopping::{Criterion, StoppingDecision};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub(crate) fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// The checkpoint suggestions and pre-fills currently come from.
#[derive(Debug, Clone)]
pub struct Published {
    pub model: Arc<Recognizer>,
    /// 0 is the baseline; round `n` publishes version `n`.
    pub version: u64,
    pub label: String,
}

/// One entry of the append-only annotation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub line_id: String,
    pub transcript: String,
    pub submitted_unix: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub number: usize,
    pub state: RoundState,
    pub criterion: Criterion,
    /// Setup name, or the trained groups joined by `+`.
    pub mask: String,
    /// Annotated lines the round trains on, in annotation order.
    pub line_ids: Vec<String>,
    pub planned_epochs: usize,
    /// Seed of the fine-tuning; with the baseline, the lines and the mask it
    /// reproduces the trace.
    pub seed: u64,
    /// CF_CER loss threshold.
    pub threshold: Option<f64>,
    /// What the round is doing right now, e.g. `"fold 2/4"` or `"training"`.
    pub phase: String,
    /// Rows of the final fine-tuning, growing while the round runs. Validation
    /// columns are null without an evaluation set.
    pub trace: Vec<EpochRow>,
    pub decision: Option<StoppingDecision>,
    pub eval_cer: Option<f64>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
}

#[derive(Debug, Clone)]
struct Decoded {
    score: f64,
    text: String,
    truncated: bool,
}

#[derive(Default)]
struct State {
    order: Vec<String>,
    images: HashMap<String, Arc<LineImage>>,
    eval: Vec<(Arc<LineImage>, String)>,
    log: Vec<Annotation>,
    latest: BTreeMap<String, String>,
    /// First-annotation order of annotated lines.
    annotated: Vec<String>,
    rounds: Vec<RoundRecord>,
    decoded: HashMap<(u64, String), Decoded>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suggestion {
    pub line_id: String,
    pub rank: usize,
    /// Cumulative greedy log-probability under the ranking checkpoint.
    pub score: f64,
    pub truncated: bool,
    /// Greedy transcript from the current checkpoint.
    pub prefill: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submitted {
    Logged,
    Unchanged,
}

/// Snapshot handed to a training round.
pub struct RoundInput {
    pub number: usize,
    pub train: Vec<(Arc<LineImage>, String)>,
    pub eval: Vec<(Arc<LineImage>, String)>,
}

pub struct Project {
    pub id: String,
    /// Recompute the ranking with every published checkpoint instead of
    /// ranking once with the baseline.
    pub rerank: bool,
    baseline: Published,
    current: RwLock<Published>,
    state: Mutex<State>,
    training: AtomicBool,
}

impl Project {
    pub fn new(id: String, baseline: Arc<Recognizer>, rerank: bool) -> Self {
        let baseline = Published { model: baseline, version: 0, label: "baseline".into() };
        Project {
            id,
            rerank,
            current: RwLock::new(baseline.clone()),
            baseline,
            state: Mutex::new(State::default()),
            training: AtomicBool::new(false),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn published(&self) -> Published {
        self.current.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn baseline(&self) -> &Recognizer {
        &self.baseline.model
    }

    pub(crate) fn publish(&self, model: Recognizer, version: u64, label: String) {
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = Published { model: Arc::new(model), version, label };
    }

    /// Adds a line to the pool. Images are rescaled to the model's height.
    pub fn add_line(&self, line_id: Option<String>, image: LineImage) -> Result<String, ApiError> {
        let image = image.resize_to_height(self.baseline.model.config.height);
        let mut st = self.lock();
        let id = line_id.unwrap_or_else(|| format!("line-{:05}", st.order.len() + 1));
        if id.is_empty() {
            return Err(ApiError::unprocessable("line id is empty"));
        }
        if st.images.contains_key(&id) {
            return Err(ApiError::conflict(format!("line {id} already exists")));
        }
        st.images.insert(id.clone(), Arc::new(image));
        st.order.push(id.clone());
        Ok(id)
    }

    /// Adds a held-out evaluation line. It is never suggested or trained on.
    pub fn add_eval_line(&self, image: LineImage, transcript: String) -> Result<(), ApiError> {
        self.check_transcript(&transcript)?;
        let image = image.resize_to_height(self.baseline.model.config.height);
        self.lock().eval.push((Arc::new(image), transcript));
        Ok(())
    }

    fn check_transcript(&self, transcript: &str) -> Result<(), ApiError> {
        if transcript.trim().is_empty() {
            return Err(ApiError::unprocessable("transcript is empty"));
        }
        let bad = self.baseline.model.config.vocab.unknown_chars(transcript);
        if !bad.is_empty() {
            let mut e = ApiError::unprocessable(format!("transcript contains characters outside the charset: {bad:?}"));
            e.offending = Some(bad.into_iter().map(String::from).collect());
            return Err(e);
        }
        Ok(())
    }

    /// Records a transcript. Resubmitting the line's current transcript is a
    /// no-op; a different one is appended and supersedes it.
    pub fn submit(&self, line_id: &str, transcript: String) -> Result<Submitted, ApiError> {
        if !self.lock().images.contains_key(line_id) {
            return Err(ApiError::not_found(format!("no line {line_id} in project {}", self.id)));
        }
        self.check_transcript(&transcript)?;
        let mut st = self.lock();
        match st.latest.get(line_id) {
            Some(t) if *t == transcript => return Ok(Submitted::Unchanged),
            Some(_) => {}
            None => st.annotated.push(line_id.to_string()),
        }
        st.latest.insert(line_id.to_string(), transcript.clone());
        st.log.push(Annotation { line_id: line_id.to_string(), transcript, submitted_unix: unix_now() });
        Ok(Submitted::Logged)
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.lock().log.clone()
    }

    /// Decodes every line of `ids` lacking a cached result under `model`.
    fn ensure_decoded(&self, model: &Published, ids: &[String], batch_size: usize) -> Result<(), ApiError> {
        let todo: Vec<(String, Arc<LineImage>)> = {
            let st = self.lock();
            ids.iter()
                .filter(|id| !st.decoded.contains_key(&(model.version, (*id).clone())))
                .map(|id| (id.clone(), st.images[id].clone()))
                .collect()
        };
        if todo.is_empty() {
            return Ok(());
        }
        let images: Vec<&LineImage> = todo.iter().map(|(_, i)| i.as_ref()).collect();
        let results = decode_by_width(&model.model, &images, batch_size)?;
        let mut st = self.lock();
        for ((id, _), d) in todo.into_iter().zip(results) {
            let entry = Decoded { score: d.confidence(), text: d.text, truncated: d.truncated };
            st.decoded.insert((model.version, id), entry);
        }
        Ok(())
    }

    /// The `k` least confident unannotated lines with pre-filled
    /// transcripts. Empty once every line is annotated.
    pub fn suggest(&self, k: usize, batch_size: usize) -> Result<Vec<Suggestion>, ApiError> {
        let current = self.published();
        let ranker = if self.rerank { current.clone() } else { self.baseline.clone() };
        let pending: Vec<String> = {
            let st = self.lock();
            st.order.iter().filter(|id| !st.latest.contains_key(*id)).cloned().collect()
        };
        if pending.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        self.ensure_decoded(&ranker, &pending, batch_size)?;
        let mut ranked: Vec<(String, Decoded)> = {
            let st = self.lock();
            pending.into_iter().map(|id| {
                let d = st.decoded[&(ranker.version, id.clone())].clone();
                (id, d)
            }).collect()
        };
        ranked.sort_by(|a, b| a.1.score.total_cmp(&b.1.score).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        let ids: Vec<String> = ranked.iter().map(|(id, _)| id.clone()).collect();
        self.ensure_decoded(&current, &ids, batch_size)?;
        let st = self.lock();
        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(i, (id, d))| {
                let prefill = st.decoded[&(current.version, id.clone())].text.clone();
                Suggestion { line_id: id, rank: i + 1, score: d.score, truncated: d.truncated, prefill }
            })
            .collect())
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::SeqCst)
    }

    /// Claims the training slot and registers a new running round.
    pub(crate) fn begin_round(&self, criterion: Criterion, mask: &ComponentMask, planned_epochs: usize) -> Result<RoundInput, ApiError> {
        let mut st = self.lock();
        if st.annotated.is_empty() {
            return Err(ApiError::unprocessable("no annotated lines to train on"));
        }
        if self.training.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return Err(ApiError::conflict("a training round is already running"));
        }
        let train: Vec<(Arc<LineImage>, String)> =
            st.annotated.iter().map(|id| (st.images[id].clone(), st.latest[id].clone())).collect();
        let number = st.rounds.len() + 1;
        let line_ids = st.annotated.clone();
        st.rounds.push(RoundRecord {
            number,
            state: RoundState::Running,
            criterion,
            mask: mask.label(),
            line_ids,
            planned_epochs,
            seed: 0,
            threshold: None,
            phase: "queued".into(),
            trace: Vec::new(),
            decision: None,
            eval_cer: None,
            checkpoint: None,
            error: None,
            started_unix: unix_now(),
            finished_unix: None,
        });
        Ok(RoundInput { number, train, eval: st.eval.clone() })
    }

    pub(crate) fn update_round(&self, number: usize, f: impl FnOnce(&mut RoundRecord)) {
        let mut st = self.lock();
        if let Some(r) = st.rounds.get_mut(number - 1) {
            f(r);
        }
    }

    pub(crate) fn end_round(&self) {
        self.training.store(false, Ordering::SeqCst);
    }

    pub fn round(&self, number: usize) -> Option<RoundRecord> {
        self.lock().rounds.get(number.wrapping_sub(1)).cloned()
    }

    pub fn rounds(&self) -> Vec<RoundRecord> {
        self.lock().rounds.clone()
    }

    /// `(pool lines, annotated lines, log entries, evaluation lines)`.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let st = self.lock();
        (st.order.len(), st.annotated.len(), st.log.len(), st.eval.len())
    }
}
