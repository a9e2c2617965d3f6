//! Shared service state and training rounds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use lineadapt::corpus::{read_manifest, Split};
use lineadapt::finetune::{finetune, Control, CurveKind, RunConfig, Sample};
use lineadapt::image::LineImage;
use lineadapt::model::{load_checkpoint, ComponentMask, Recognizer};
use lineadapt::seed;
use lineadapt::stopping::{
    decide, estimate_epoch, estimate_threshold, run_x4_folds, x4_base_epoch, Criterion, DecideContext, Reference, ThresholdMode,
    FIXED_EPOCH, X4_FOLDS,
};
use lineadapt_harness::spec::{RunTemplate, Selection};
use lineadapt_harness::store::{Store, StoredRun};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ServiceError};
use crate::project::{unix_now, Project, RoundInput, RoundState};

const ROUND_SEED: u64 = 0x5eed_0001;

/// A project preloaded from a corpus manifest: one writer's pool lines to
/// annotate and test lines with transcripts as the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoProject {
    pub corpus: PathBuf,
    /// Defaults to the first target writer.
    #[serde(default)]
    pub writer: Option<u32>,
    #[serde(default)]
    pub pool_lines: Option<usize>,
    #[serde(default)]
    pub eval_lines: Option<usize>,
}

/// Service configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub baseline: PathBuf,
    #[serde(default)]
    pub run: RunTemplate,
    /// Run store whose traces serve as references for EP_CER, EP_LOSS and
    /// CF_CER rounds.
    #[serde(default)]
    pub reference_store: Option<PathBuf>,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(default = "default_decode_batch")]
    pub decode_batch_size: usize,
    #[serde(default)]
    pub demo: Option<DemoProject>,
}

fn default_decode_batch() -> usize {
    32
}

impl ServiceConfig {
    pub fn new(baseline: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            baseline: baseline.into(),
            run: RunTemplate::default(),
            reference_store: None,
            threshold_mode: ThresholdMode::default(),
            decode_batch_size: default_decode_batch(),
            demo: None,
        }
    }
}

/// What `POST /rounds` asks for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRequest {
    pub criterion: String,
    #[serde(default)]
    pub mask: Option<MaskSpec>,
    /// Overrides the configured epoch budget.
    #[serde(default)]
    pub epochs: Option<usize>,
}

/// A setup name such as `"ALL"` or an explicit list of parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSpec {
    Setup(String),
    Groups(Vec<lineadapt::nn::Group>),
}

impl MaskSpec {
    fn resolve(&self) -> Result<ComponentMask, ApiError> {
        match self {
            MaskSpec::Setup(name) => name
                .parse::<lineadapt::model::Setup>()
                .map(|s| s.mask())
                .map_err(|e| ApiError::unprocessable(e.to_string())),
            MaskSpec::Groups(g) => ComponentMask::new(g.iter().copied()).map_err(|e| ApiError::unprocessable(e.to_string())),
        }
    }
}

/// How a round stops, fixed before training starts.
#[derive(Debug, Clone, Copy)]
enum Plan {
    /// Stop at the first epoch with zero training CER.
    ZeroTrainCer,
    /// Stop once the clean training loss reaches `tau`.
    Threshold(f64),
    /// Train exactly this many epochs.
    Fixed(usize),
    /// Run the folds first, then train for their chosen epoch count.
    Folds,
}

pub struct Service {
    baseline: Arc<Recognizer>,
    run: RunTemplate,
    references: Vec<StoredRun>,
    threshold_mode: ThresholdMode,
    pub decode_batch_size: usize,
    projects: RwLock<BTreeMap<String, Arc<Project>>>,
    next_id: AtomicU64,
}

impl Service {
    pub fn new(baseline: Recognizer, run: RunTemplate, references: Vec<StoredRun>, threshold_mode: ThresholdMode) -> Self {
        Service {
            baseline: Arc::new(baseline),
            run,
            references,
            threshold_mode,
            decode_batch_size: default_decode_batch(),
            projects: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    /// Loads the checkpoint, the reference store and the demo project.
    pub fn from_config(cfg: &ServiceConfig, base_dir: &Path) -> Result<Self, ServiceError> {
        let (baseline, _) = load_checkpoint(&base_dir.join(&cfg.baseline))?;
        let references = match &cfg.reference_store {
            Some(p) => Store::new(base_dir.join(p)).load_runs()?,
            None => Vec::new(),
        };
        let mut svc = Service::new(baseline, cfg.run.clone(), references, cfg.threshold_mode);
        svc.decode_batch_size = cfg.decode_batch_size.max(1);
        if let Some(demo) = &cfg.demo {
            svc.seed_demo(demo, base_dir)?;
        }
        Ok(svc)
    }

    pub fn baseline(&self) -> &Arc<Recognizer> {
        &self.baseline
    }

    pub fn create_project(&self, rerank: bool) -> Arc<Project> {
        let id = format!("p{:04}", self.next_id.fetch_add(1, Ordering::SeqCst));
        self.insert_project(id, rerank)
    }

    fn insert_project(&self, id: String, rerank: bool) -> Arc<Project> {
        let p = Arc::new(Project::new(id.clone(), self.baseline.clone(), rerank));
        self.projects.write().unwrap_or_else(|e| e.into_inner()).insert(id, p.clone());
        p
    }

    pub fn project(&self, id: &str) -> Option<Arc<Project>> {
        self.projects.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    /// Creates project `demo` from a corpus manifest.
    pub fn seed_demo(&self, demo: &DemoProject, base_dir: &Path) -> Result<Arc<Project>, ServiceError> {
        let corpus = read_manifest(&base_dir.join(&demo.corpus))?;
        let writer = match demo.writer {
            Some(w) => w,
            None => corpus
                .target_writers()
                .next()
                .map(|w| w.writer_id)
                .ok_or_else(|| ServiceError::Config("demo corpus has no target writers".into()))?,
        };
        let project = self.insert_project("demo".into(), false);
        let pool = corpus.lines_of(writer, Split::FinetunePool);
        for l in pool.iter().take(demo.pool_lines.unwrap_or(usize::MAX)) {
            project.add_line(Some(l.line_id.clone()), l.image.clone()).map_err(|e| ServiceError::Config(e.message))?;
        }
        for l in corpus.lines_of(writer, Split::TargetTest).iter().take(demo.eval_lines.unwrap_or(usize::MAX)) {
            project.add_eval_line(l.image.clone(), l.transcript.clone()).map_err(|e| ServiceError::Config(e.message))?;
        }
        log::info!("demo project: writer {writer}, {} pool lines", project.counts().0);
        Ok(project)
    }

    /// Reference runs for `mask` at the stored line count nearest to `n`
    /// (the smaller on ties). Random-selection runs are preferred.
    fn references_for(&self, mask: &ComponentMask, n: usize) -> Option<(usize, Vec<&StoredRun>)> {
        let setup = mask.setup()?;
        let of = |sel: Selection| -> Vec<&StoredRun> {
            self.references.iter().filter(|r| r.record.cell.setup == setup && r.record.cell.selection == sel).collect()
        };
        let mut runs = of(Selection::Random);
        if runs.is_empty() {
            runs = of(Selection::Active);
        }
        let level = runs.iter().map(|r| r.record.cell.level).min_by_key(|&l| (l.abs_diff(n), l))?;
        Some((level, runs.into_iter().filter(|r| r.record.cell.level == level).collect()))
    }

    /// Validates the request, claims the project's training slot and trains
    /// in a background thread. Returns the round number.
    pub fn start_round(self: &Arc<Self>, project: &Arc<Project>, req: &RoundRequest) -> Result<usize, ApiError> {
        let criterion: Criterion = req.criterion.parse().map_err(|e: lineadapt::error::Error| ApiError::unprocessable(e.to_string()))?;
        if criterion.is_oracle() {
            return Err(ApiError::unprocessable(format!("{criterion} needs test transcripts and is available only in experiments")));
        }
        let mask = match &req.mask {
            Some(m) => m.resolve()?,
            None => lineadapt::model::Setup::All.mask(),
        };
        let mut cfg = self.run.config(lineadapt::model::Setup::All, 0);
        cfg.mask = mask.clone();
        if let Some(e) = req.epochs {
            cfg.epochs = e;
        }
        cfg.validate().map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let annotated = project.counts().1;
        let mut ref_level = None;
        let plan = match criterion {
            Criterion::TrnCer => Plan::ZeroTrainCer,
            Criterion::Ep20 => Plan::Fixed(FIXED_EPOCH.min(cfg.epochs)),
            Criterion::X4 if annotated < X4_FOLDS => Plan::ZeroTrainCer,
            Criterion::X4 => Plan::Folds,
            Criterion::EpCer | Criterion::EpLoss | Criterion::CfCer => {
                let (level, runs) = self.references_for(&mask, annotated).ok_or_else(|| {
                    ApiError::unprocessable(format!("{criterion} needs reference traces for mask {}; none are configured", mask.label()))
                })?;
                ref_level = Some(level);
                let refs = references(&runs);
                if criterion == Criterion::CfCer {
                    Plan::Threshold(estimate_threshold(&refs, self.threshold_mode).map_err(|e| ApiError::unprocessable(e.to_string()))?)
                } else {
                    let kind = if criterion == Criterion::EpCer { CurveKind::ValCer } else { CurveKind::ValLoss };
                    let curves: Vec<Vec<f64>> = refs.iter().map(|r| r.trace.curve(kind)).collect();
                    let e = estimate_epoch(&curves).map_err(|e| ApiError::unprocessable(e.to_string()))?;
                    Plan::Fixed(e.min(cfg.epochs))
                }
            }
            Criterion::TstCer => unreachable!("oracle criteria are rejected above"),
        };
        if let Plan::Fixed(e) = plan {
            cfg.epochs = e;
        }
        let input = project.begin_round(criterion, &mask, cfg.epochs)?;
        cfg.seed = seed::derive(ROUND_SEED, "round", input.number as u64);
        let number = input.number;
        project.update_round(number, |r| {
            r.seed = cfg.seed;
            r.threshold = match plan {
                Plan::Threshold(tau) => Some(tau),
                _ => None,
            };
        });
        let (svc, worker) = (self.clone(), project.clone());
        let spawned = std::thread::Builder::new().name(format!("round-{}-{number}", project.id)).spawn(move || {
            if let Err(e) = svc.train_round(&worker, criterion, plan, ref_level, cfg, &input) {
                log::error!("project {} round {number} failed: {e}", worker.id);
                fail_round(&worker, number, e.to_string());
            }
            worker.end_round();
        });
        if let Err(e) = spawned {
            fail_round(project, number, e.to_string());
            project.end_round();
            return Err(ApiError::internal(format!("could not start training: {e}")));
        }
        Ok(number)
    }

    fn train_round(
        &self,
        project: &Project,
        criterion: Criterion,
        plan: Plan,
        ref_level: Option<usize>,
        mut cfg: RunConfig,
        input: &RoundInput,
    ) -> lineadapt::error::Result<()> {
        let number = input.number;
        let train: Vec<Sample> = input.train.iter().map(|(i, t)| sample(i, t)).collect();
        let eval: Vec<Sample> = input.eval.iter().map(|(i, t)| sample(i, t)).collect();
        let baseline = project.baseline();
        let mut folds = Vec::new();
        if let Plan::Folds = plan {
            project.update_round(number, |r| r.phase = format!("{X4_FOLDS} cross-validation folds"));
            folds = run_x4_folds(baseline, &cfg, &train)?;
            cfg.epochs = x4_base_epoch(&folds)?.min(cfg.epochs);
            project.update_round(number, |r| r.planned_epochs = cfg.epochs);
        }
        project.update_round(number, |r| r.phase = "training".into());
        let outcome = finetune(baseline, &cfg, &train, &eval, |row, _| {
            project.update_round(number, |r| r.trace.push(*row));
            let stop = match plan {
                Plan::ZeroTrainCer => row.train_cer_clean == 0.0,
                Plan::Threshold(tau) => row.train_loss_clean <= tau,
                Plan::Fixed(_) | Plan::Folds => false,
            };
            if stop {
                Control::Stop
            } else {
                Control::Continue
            }
        })?;
        if outcome.trace.aborted {
            return Err(lineadapt::error::Error::Trace("training diverged".into()));
        }
        let runs = match ref_level {
            Some(l) => self.references_for(&cfg.mask, l).map(|(_, r)| r).unwrap_or_default(),
            None => Vec::new(),
        };
        let refs = references(&runs);
        let ctx = DecideContext { references: &refs, threshold_mode: self.threshold_mode, x4_folds: Some(&folds) };
        let decision = decide(criterion, &outcome.trace, &ctx, 1.0)?;
        debug_assert_eq!(decision.epoch, outcome.trace.epochs());
        let eval_cer = outcome.trace.rows.last().map(|r| r.val_cer).filter(|v| v.is_finite());
        let label = format!("round-{number}");
        project.publish(outcome.model, number as u64, label.clone());
        project.update_round(number, |r| {
            r.state = RoundState::Completed;
            r.phase = "done".into();
            r.decision = Some(decision);
            r.eval_cer = eval_cer;
            r.checkpoint = Some(label);
            r.finished_unix = Some(unix_now());
        });
        log::info!("project {} round {number}: {} epochs, eval CER {eval_cer:?}", project.id, outcome.trace.epochs());
        Ok(())
    }
}

fn fail_round(project: &Project, number: usize, message: String) {
    project.update_round(number, |r| {
        r.state = RoundState::Failed;
        r.error = Some(message);
        r.finished_unix = Some(unix_now());
    });
}

fn sample<'a>(image: &'a LineImage, transcript: &'a str) -> Sample<'a> {
    Sample { image, transcript }
}

fn references<'a>(runs: &[&'a StoredRun]) -> Vec<Reference<'a>> {
    runs.iter().map(|r| Reference { writer_id: r.record.cell.writer, trace: &r.trace }).collect()
}
