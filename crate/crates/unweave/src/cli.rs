//! Command-line interface.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unweave_core::controller::{ControllerKind, UpdateKind};
use unweave_core::gradcheck::{finite_diff_check, GradCheckConfig, GradReport};
use unweave_core::storygen::sample_synthetic_story;
use unweave_core::train::{derive_seed, resume_training, Trained};
use unweave_core::{Model, Story};

use crate::checkpoint::{Checkpoint, Lineage, Stage};
use crate::config::{resolve, ConfigFile, RunConfig};
use crate::io::{read_jsonl, read_stories, write_stories, StoryRecord};
use crate::pipeline::{self, tags, Method};
use crate::report::{self, EvalDocument};
use crate::service::{self, AppState};
use crate::trainlog::CsvLogger;

/// Gradient-check tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "unweave", version, about = "Online unweaving of clip-feature streams into activity threads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// JSON document with named profiles; built-in profiles when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Profile to use from the document.
    #[arg(long, default_value = crate::config::DESK)]
    pub profile: String,
    /// Overrides the profile's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the profile's worker count for per-story work.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl ConfigArgs {
    pub fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = resolve(self.config.as_deref(), &self.profile)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            if w == 0 {
                bail!("--workers must be positive");
            }
            cfg.eval.workers = w;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    /// Fresh synthetic stories cut from the pretraining streams.
    Synthetic,
    /// Natural stories of the training split.
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineName {
    Single,
    Chance,
    Cluster,
    Predictability,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate stories as JSONL.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "synthetic")]
        kind: GenKind,
        /// Number of synthetic stories (natural splits use the profile's sizes).
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on synthetic stories.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory (defaults to the profile's).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finetune on natural stories with early stopping.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Starting checkpoint; random initialisation when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Training stories; the profile's natural split when omitted.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on labelled stories.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stories: PathBuf,
        /// Method name in the report (defaults to the checkpoint file stem).
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a baseline on labelled stories.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        name: BaselineName,
        #[arg(long)]
        stories: PathBuf,
        /// Validation stories for fitting thresholds (cluster, predictability).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Fixed threshold instead of fitting one.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check all four controller/update combinations, not just the profile's.
        #[arg(long)]
        all: bool,
    },
    /// Run the annotation service.
    Serve {
        /// Story pool (JSONL).
        #[arg(long)]
        stories: PathBuf,
        /// Append-only annotation log (JSONL); replayed on start.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory with the annotator UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Seed for the order in which stories are handed out.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tables and plot series from evaluation results.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
    /// Print the built-in profiles as a config document.
    Config,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { cfg, kind, count, out } => gen(&cfg.load()?, kind, count, &out),
        Command::Train { cfg, resume, out_dir } => {
            let cfg = cfg.load()?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            train(&cfg, resume.as_deref(), &dir)
        }
        Command::Finetune {
            cfg,
            model,
            train,
            val,
            out_dir,
        } => {
            let cfg = cfg.load()?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            finetune(&cfg, model.as_deref(), train.as_deref(), val.as_deref(), &dir)
        }
        Command::Eval {
            model,
            stories,
            name,
            out_dir,
            workers,
        } => eval(&model, &stories, name, &out_dir, workers),
        Command::Baseline {
            cfg,
            name,
            stories,
            val,
            threshold,
            out_dir,
        } => baseline(&cfg.load()?, name, &stories, val.as_deref(), threshold, &out_dir),
        Command::Gradcheck { cfg, all } => {
            let reports = gradcheck(&cfg.load()?, all)?;
            let worst = reports.iter().map(|(_, r)| r.overall_max).fold(0.0, f64::max);
            if worst < GRADCHECK_TOL {
                Ok(())
            } else {
                bail!("gradient check failed: max relative error {worst:.3e} ≥ {GRADCHECK_TOL:e}")
            }
        }
        Command::Serve {
            stories,
            log,
            addr,
            static_dir,
            seed,
        } => {
            let pool: Vec<StoryRecord> = read_jsonl(&stories)?;
            for r in &pool {
                r.to_story()?;
            }
            let state = Arc::new(AppState::open(pool, &log, seed)?);
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(service::serve(state, addr, static_dir))
        }
        Command::Report { results } => {
            let text = report::report(&results)?;
            print!("{text}");
            for p in report::outputs(&results) {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&ConfigFile::builtin())?);
            Ok(())
        }
    }
}

fn gen(cfg: &RunConfig, kind: GenKind, count: usize, out: &Path) -> anyhow::Result<()> {
    let world = pipeline::build_world(cfg)?;
    let stories = match kind {
        GenKind::Synthetic => {
            let streams = pipeline::pretrain_streams(cfg, &world)?;
            // a stream of its own, so `gen` output never repeats training batches
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tags::BATCHES ^ 0xFFFF));
            (0..count)
                .map(|i| {
                    let k = i % streams.len();
                    Ok(sample_synthetic_story(
                        &streams[k],
                        k as u64,
                        format!("syn-{i}"),
                        &cfg.synthetic,
                        &mut rng,
                    )?)
                })
                .collect::<anyhow::Result<Vec<Story>>>()?
        }
        GenKind::Train | GenKind::Val | GenKind::Test => {
            let splits = pipeline::natural_splits(cfg, &world)?;
            match kind {
                GenKind::Train => splits.train,
                GenKind::Val => splits.val,
                _ => splits.test,
            }
        }
    };
    write_stories(out, &stories)?;
    log::info!("wrote {} stories to {}", stories.len(), out.display());
    Ok(())
}

fn lineage(cfg: &RunConfig, stage: Stage, parent: Option<String>) -> Lineage {
    Lineage {
        profile: cfg.profile.clone(),
        master_seed: cfg.seed,
        stage,
        parent_sha256: parent,
    }
}

fn train(cfg: &RunConfig, resume: Option<&Path>, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let world = pipeline::build_world(cfg)?;
    let streams = pipeline::pretrain_streams(cfg, &world)?;
    let (start, parent) = match resume {
        Some(p) => {
            let (ck, sha) = Checkpoint::load(p)?;
            if ck.lineage.stage != Stage::Pretrain {
                bail!("{} is not a pretraining checkpoint", p.display());
            }
            if ck.model.config != cfg.model {
                bail!("{} was trained with a different model config", p.display());
            }
            let adam = ck.optimizer.context("checkpoint has no optimizer state")?;
            (
                Trained {
                    model: ck.model,
                    adam,
                    steps: ck.step,
                },
                Some(sha),
            )
        }
        None => {
            let model = pipeline::init_model(cfg)?;
            let adam = unweave_core::optim::AdamState::for_params(
                &model.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>(),
            );
            (Trained { model, adam, steps: 0 }, None)
        }
    };
    let mut logger = CsvLogger::create(&dir.join("pretrain.csv"))?
        .with_checkpoints(dir.join("checkpoints"), lineage(cfg, Stage::Pretrain, parent.clone()));
    let mut source = pipeline::synthetic_batches(cfg, streams)?;
    // a resumed run must see the batches it would have seen
    if start.steps > 0 {
        use unweave_core::train::BatchSource;
        for _ in 0..start.steps {
            source.next_batch(cfg.pretrain.batch_size)?;
        }
    }
    let seed = derive_seed(cfg.seed, tags::PRETRAIN);
    let outcome = resume_training(start, &mut source, &cfg.pretrain, seed, &mut logger);
    logger.finish()?;
    let final_path = dir.join("pretrained.ckpt.json");
    match outcome {
        Ok(t) => {
            let ck = Checkpoint::new(t.model, Some(t.adam), t.steps, lineage(cfg, Stage::Pretrain, parent));
            ck.save(&final_path)?;
            log::info!("wrote {}", final_path.display());
            Ok(())
        }
        Err(f) => {
            let good = dir.join("last-good.ckpt.json");
            let t = *f.last_good;
            Checkpoint::new(t.model, Some(t.adam), t.steps, lineage(cfg, Stage::Pretrain, parent)).save(&good)?;
            bail!("training stopped at step {}: {} (last good state in {})", f.step, f.error, good.display())
        }
    }
}

fn finetune(
    cfg: &RunConfig,
    model: Option<&Path>,
    train: Option<&Path>,
    val: Option<&Path>,
    dir: &Path,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let (start, parent) = match model {
        Some(p) => {
            let (ck, sha) = Checkpoint::load(p)?;
            (ck.model, Some(sha))
        }
        None => (pipeline::init_model(cfg)?, None),
    };
    let (train_set, val_set) = match (train, val) {
        (Some(t), Some(v)) => (read_stories(t)?, read_stories(v)?),
        (None, None) => {
            let world = pipeline::build_world(cfg)?;
            let s = pipeline::natural_splits(cfg, &world)?;
            (s.train, s.val)
        }
        _ => bail!("give both --train and --val, or neither"),
    };
    let mut logger = CsvLogger::create(&dir.join("finetune.csv"))?.with_evals(&dir.join("finetune_evals.csv"))?;
    let out = pipeline::run_finetune(cfg, start, &train_set, &val_set, &mut logger)?;
    logger.finish()?;
    log::info!(
        "best validation RI {:.4} at step {} of {}",
        out.best_val_ri,
        out.best_step,
        out.steps_run
    );
    let path = dir.join("finetuned.ckpt.json");
    Checkpoint::new(out.model, None, out.best_step, lineage(cfg, Stage::Finetune, parent)).save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_eval(out_dir: &Path, stories: &Path, report: unweave_core::metrics::MetricsReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut doc = EvalDocument::load_or_new(out_dir, &stories.display().to_string())?;
    doc.upsert(report);
    doc.save(out_dir)?;
    print!("{}", report::report(out_dir)?);
    Ok(())
}

fn eval(model: &Path, stories: &Path, name: Option<String>, out_dir: &Path, workers: usize) -> anyhow::Result<()> {
    if workers == 0 {
        bail!("--workers must be positive");
    }
    let (ck, _) = Checkpoint::load(model)?;
    let set = read_stories(stories)?;
    let name = name.unwrap_or_else(|| {
        model
            .file_name()
            .and_then(|s| s.to_str())
            .map_or("model".into(), |s| s.trim_end_matches(".json").trim_end_matches(".ckpt").to_string())
    });
    let report = pipeline::evaluate(&name, &Method::Model(ck.model), &set, workers)?;
    write_eval(out_dir, stories, report)
}

fn baseline(
    cfg: &RunConfig,
    name: BaselineName,
    stories: &Path,
    val: Option<&Path>,
    threshold: Option<f64>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let set = read_stories(stories)?;
    let val_set = || -> anyhow::Result<Vec<Story>> {
        match val {
            Some(v) => read_stories(v),
            None => bail!("--val is needed to fit a threshold (or pass --threshold)"),
        }
    };
    let (label, method) = match name {
        BaselineName::Single => ("single-thread", Method::SingleThread),
        BaselineName::Chance => ("chance", Method::Chance),
        BaselineName::Cluster => {
            let c = match threshold {
                Some(t) => unweave_core::baselines::ClusteringConfig { threshold: t },
                None => unweave_core::baselines::fit_threshold(&val_set()?)?,
            };
            log::info!("clustering threshold {}", c.threshold);
            ("online-clustering", Method::Cluster(c))
        }
        BaselineName::Predictability => {
            let p = match threshold {
                Some(t) => unweave_core::baselines::PredictabilityConfig {
                    threshold: t,
                    ..cfg.eval.predictability
                },
                None => unweave_core::baselines::fit_predictability(&val_set()?, &cfg.eval.predictability)?,
            };
            log::info!("predictability threshold {}", p.threshold);
            ("predictability", Method::Predictability(p))
        }
    };
    let report = pipeline::evaluate(label, &method, &set, cfg.eval.workers)?;
    write_eval(out_dir, stories, report)
}

/// Runs the check on a story with all three scenarios, for the profile's
/// model or for every controller/update pair.
pub fn gradcheck(cfg: &RunConfig, all: bool) -> anyhow::Result<Vec<(String, GradReport)>> {
    let world = pipeline::build_world(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tags::PRETRAIN_STREAMS));
    let stream = world.stream(cfg.synthetic.min_stream_len.max(20_000), &mut rng)?;
    let story = pipeline::story_with_all_scenarios(cfg, &stream, cfg.seed)?;
    let combos: Vec<(ControllerKind, UpdateKind)> = if all {
        vec![
            (ControllerKind::Linear, UpdateKind::Gru),
            (ControllerKind::Linear, UpdateKind::LastClip),
            (ControllerKind::Transformer, UpdateKind::Gru),
            (ControllerKind::Transformer, UpdateKind::LastClip),
        ]
    } else {
        vec![(cfg.model.controller, cfg.model.update)]
    };
    let mut out = Vec::new();
    for (controller, update) in combos {
        let mut mc = cfg.model.clone();
        mc.controller = controller;
        mc.update = update;
        let model = Model::init(mc, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tags::INIT)))?;
        let rep = finite_diff_check(
            &model,
            std::slice::from_ref(&story),
            &cfg.pretrain.loss,
            &GradCheckConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )?;
        let label = format!("{controller:?}/{update:?}");
        println!("{label}: max relative error {:.3e}", rep.overall_max);
        for g in &rep.groups {
            let err = g.max_rel_err.map_or_else(|| "-".into(), |e| format!("{e:.3e}"));
            println!("  {:<40} {:>7}/{:<7} {err}", g.name, g.checked, g.len);
        }
        out.push((label, rep));
    }
    Ok(out)
}
