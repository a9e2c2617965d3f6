use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lineadapt::charset::CharsetSpec;
use lineadapt::corpus::{check_variant_hygiene, generate_corpus, read_manifest, write_manifest, CorpusSpec};
use lineadapt::finetune::{pretrain, PretrainConfig};
use lineadapt::model::{save_checkpoint, CheckpointMeta, ModelConfig};
use lineadapt::stats::Statistic;
use lineadapt::stopping::Criterion;
use lineadapt_harness::analysis::{stability_sweep, write_report, write_sweep};
use lineadapt_harness::decide::{decide_all, verify_store};
use lineadapt_harness::grid::{run_grid, GridContext};
use lineadapt_harness::spec::{ExperimentSpec, Selection};
use lineadapt_harness::store::Store;
use lineadapt_harness::HarnessError;
use lineadapt_service::{Service, ServiceConfig};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "lineadapt", version, about = "Writer adaptation of text-line recognizers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Root seed; overrides the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: corpus directory, checkpoint file or run store.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel fine-tuning runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenCorpus,
    /// Pretrain the baseline recognizer on the source writers.
    Pretrain {
        /// Corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// Model size: micro, tiny, base or large.
        #[arg(long)]
        model: Option<String>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune every random-selection cell of the experiment.
    RunGrid,
    /// Fine-tune every active-selection cell of the experiment.
    RunActive,
    /// Write stopping decisions for every stored run.
    Decide,
    /// Re-decide with scaled epochs and summarize the effect.
    SweepStability {
        /// Scale factors; defaults to the experiment's.
        #[arg(long, value_delimiter = ',')]
        factors: Vec<f64>,
        /// Criteria; defaults to the experiment's.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<Criterion>,
    },
    /// Bootstrapped tables and plots per block, selection and mask.
    Report {
        #[arg(long, value_enum, default_value_t = StatArg::Relative)]
        statistic: StatArg,
        /// Criterion whose mean improvement normalizes the others.
        #[arg(long)]
        normalizer: Option<Criterion>,
    },
    /// Recompute every decision and compare it with the stored one.
    VerifyStore,
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    Relative,
    Normalized,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
}

fn store(g: &Global) -> Store {
    Store::new(g.out.clone().unwrap_or_else(|| PathBuf::from("store")))
}

fn experiment(g: &Global) -> Result<(ExperimentSpec, PathBuf)> {
    let path = g.config.as_deref().context("--config <experiment.json> is required")?;
    let mut spec: ExperimentSpec = read_json(path)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    Ok((spec, config_dir(path)))
}

fn gen_corpus(g: &Global) -> Result<()> {
    let mut spec: CorpusSpec = match &g.config {
        Some(p) => read_json(p)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec, &CharsetSpec::default())?;
    check_variant_hygiene(&corpus)?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&corpus, &manifest)?;
    for (split, n) in corpus.split_counts() {
        println!("{split:?}: {n} lines");
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_pretrain(g: &Global, corpus: &Path, model: Option<&str>, epochs: Option<usize>) -> Result<()> {
    let mut cfg: PretrainConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(m) = model {
        cfg.model = ModelConfig::named(m).with_context(|| format!("unknown model size {m:?}"))?;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let corpus = read_manifest(corpus)?;
    let (model, report) = pretrain(&cfg, &corpus, |e| {
        println!("epoch {}: train loss {:.4}, test CER {:.4} ({:.0}s)", e.epoch, e.train_loss, e.test_cer, e.seconds)
    })?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("baseline.ckpt"));
    let meta = CheckpointMeta::from([
        ("pretrain_epochs".to_string(), cfg.epochs.to_string()),
        ("test_cer".to_string(), report.final_test_cer.to_string()),
    ]);
    save_checkpoint(&model, &meta, &out)?;
    let report_path = out.with_extension("report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", report_path.display()))?;
    if !report.reached_target {
        log::warn!("test CER {:.4} is above the target {:.4}", report.final_test_cer, cfg.target_cer);
    }
    println!("wrote {} (test CER {:.4})", out.display(), report.final_test_cer);
    Ok(())
}

fn grid(g: &Global, selection: Selection) -> Result<()> {
    let (spec, base) = experiment(g)?;
    if spec.max_level(selection) == 0 {
        bail!("the experiment has no {selection} blocks");
    }
    let mut ctx = GridContext::load(spec, &base)?;
    let summary = run_grid(&mut ctx, &store(g), g.workers, Some(selection))?;
    println!("{} runs executed, {} already complete", summary.executed, summary.skipped);
    Ok(())
}

fn serve(g: &Global, addr: SocketAddr) -> Result<()> {
    let path = g.config.as_deref().context("--config <service.json> is required")?;
    let cfg: ServiceConfig = read_json(path)?;
    let svc = Arc::new(Service::from_config(&cfg, &config_dir(path))?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(lineadapt_service::serve(svc, addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenCorpus => gen_corpus(g),
        Command::Pretrain { corpus, model, epochs } => run_pretrain(g, &corpus, model.as_deref(), epochs),
        Command::RunGrid => grid(g, Selection::Random),
        Command::RunActive => grid(g, Selection::Active),
        Command::Decide => {
            let st = store(g);
            let n = decide_all(&st, &st.read_spec()?)?;
            println!("decided {n} runs");
            Ok(())
        }
        Command::SweepStability { factors, criteria } => {
            let st = store(g);
            let spec = st.read_spec()?;
            let factors = if factors.is_empty() { spec.scale_factors.clone() } else { factors };
            let criteria = if criteria.is_empty() { spec.criteria.clone() } else { criteria };
            let rows = stability_sweep(&st, &spec, &criteria, &factors)?;
            write_sweep(&st, &rows)?;
            println!("wrote {} sweep rows to {}", rows.len(), st.report_dir().display());
            Ok(())
        }
        Command::Report { statistic, normalizer } => {
            let st = store(g);
            let spec = st.read_spec()?;
            let stat = match statistic {
                StatArg::Relative => Statistic::RelativeImprovement,
                StatArg::Normalized => Statistic::NormalizedImprovement,
            };
            for stem in write_report(&st, &spec, stat, normalizer)? {
                println!("{}", st.report_dir().join(stem).display());
            }
            Ok(())
        }
        Command::VerifyStore => {
            let n = verify_store(&store(g))?;
            println!("{n} runs verified");
            Ok(())
        }
        Command::Serve { addr } => serve(g, addr),
    }
}

fn is_integrity(e: &anyhow::Error) -> bool {
    use lineadapt::error::Error as E;
    e.chain().any(|c| {
        c.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_integrity)
            || matches!(c.downcast_ref::<E>(), Some(E::Checksum { .. } | E::MissingImage(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_integrity(&e) { 2 } else { 1 })
        }
    }
}
