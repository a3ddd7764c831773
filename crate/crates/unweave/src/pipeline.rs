//! The experiment pipeline: world and datasets from a [`RunConfig`], the three
//! training regimes, and evaluation of models and baselines.

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unweave_core::baselines::{
    fit_predictability, fit_threshold, online_cluster, predict_single_thread, predictability, Chance,
    ClusteringConfig, PredictabilityConfig, SingleThread,
};
use unweave_core::metrics::{tfa, ForcedPredictor, MetricsReport, StoryResult};
use unweave_core::storygen::{sample_balanced_natural_stories, FeatureStream, World};
use unweave_core::train::{
    derive_seed, finetune, pretrain, FinetuneOutcome, SyntheticBatches, TrainFailure, TrainObserver, Trained,
};
use unweave_core::{unweave_online, Model, Story, ThreadAssignment};

use crate::config::RunConfig;

/// Sub-stream tags for [`derive_seed`].
pub mod tags {
    pub const WORLD: u64 = 1;
    pub const PRETRAIN_STREAMS: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const NATURAL: u64 = 7;
}

/// Stream ids recorded in story provenance.
pub const TRAIN_STREAM_ID: u64 = 1000;
pub const VAL_STREAM_ID: u64 = 1001;
pub const TEST_STREAM_ID: u64 = 1002;

fn rng_for(cfg: &RunConfig, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag))
}

pub fn build_world(cfg: &RunConfig) -> anyhow::Result<World> {
    Ok(World::sample(cfg.world.clone(), &mut rng_for(cfg, tags::WORLD))?)
}

/// Streams that synthetic stories are cut from; ids `0..n`.
pub fn pretrain_streams(cfg: &RunConfig, world: &World) -> anyhow::Result<Vec<FeatureStream>> {
    let mut rng = rng_for(cfg, tags::PRETRAIN_STREAMS);
    (0..cfg.data.pretrain_streams)
        .map(|_| Ok(world.stream(cfg.world.stream_len, &mut rng)?))
        .collect()
}

#[derive(Clone, Debug)]
pub struct NaturalSplits {
    pub train: Vec<Story>,
    pub val: Vec<Story>,
    pub test: Vec<Story>,
}

/// Natural stories for train, val and test, each from its own stream so no
/// window is shared between splits.
pub fn natural_splits(cfg: &RunConfig, world: &World) -> anyhow::Result<NaturalSplits> {
    let mut rng = rng_for(cfg, tags::NATURAL);
    let d = &cfg.data;
    let mut split = |stream_id: u64, prefix: &str, per_bucket: usize| -> anyhow::Result<Vec<Story>> {
        let stream = world.stream(d.natural_stream_len, &mut rng)?;
        let stories = sample_balanced_natural_stories(
            &stream,
            stream_id,
            prefix,
            per_bucket,
            d.max_threads,
            &cfg.natural,
            d.max_draws,
            &mut rng,
        )?;
        anyhow::ensure!(!stories.is_empty(), "no natural stories for split {prefix}");
        Ok(stories)
    };
    Ok(NaturalSplits {
        train: split(TRAIN_STREAM_ID, "train-", d.train_per_bucket)?,
        val: split(VAL_STREAM_ID, "val-", d.val_per_bucket)?,
        test: split(TEST_STREAM_ID, "test-", d.test_per_bucket)?,
    })
}

pub fn init_model(cfg: &RunConfig) -> anyhow::Result<Model> {
    Ok(Model::init(cfg.model.clone(), &mut rng_for(cfg, tags::INIT))?)
}

pub fn synthetic_batches(cfg: &RunConfig, streams: Vec<FeatureStream>) -> anyhow::Result<SyntheticBatches> {
    Ok(SyntheticBatches::new(
        streams,
        cfg.synthetic.clone(),
        derive_seed(cfg.seed, tags::BATCHES),
    )?)
}

pub fn run_pretrain(
    cfg: &RunConfig,
    model: Model,
    streams: Vec<FeatureStream>,
    observer: &mut dyn TrainObserver,
) -> anyhow::Result<Result<Trained, TrainFailure>> {
    let mut source = synthetic_batches(cfg, streams)?;
    Ok(pretrain(
        model,
        &mut source,
        &cfg.pretrain,
        derive_seed(cfg.seed, tags::PRETRAIN),
        observer,
    ))
}

pub fn run_finetune(
    cfg: &RunConfig,
    model: Model,
    train: &[Story],
    val: &[Story],
    observer: &mut dyn TrainObserver,
) -> anyhow::Result<FinetuneOutcome> {
    Ok(finetune(
        model,
        train,
        val,
        &cfg.finetune,
        derive_seed(cfg.seed, tags::FINETUNE),
        observer,
    )?)
}

/// Maps `f` over `items` on `workers` threads, keeping input order.
pub fn par_map<T, U, F>(workers: usize, items: &[T], f: F) -> anyhow::Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> anyhow::Result<U> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// A method that can be evaluated on labelled stories.
#[allow(clippy::large_enum_variant)]
pub enum Method {
    Model(Model),
    SingleThread,
    Chance,
    Cluster(ClusteringConfig),
    Predictability(PredictabilityConfig),
}

impl Method {
    fn predictor(&self) -> &(dyn ForcedPredictor + Sync) {
        match self {
            Method::Model(m) => m,
            Method::SingleThread => &SingleThread,
            Method::Chance => &Chance,
            Method::Cluster(c) => c,
            Method::Predictability(p) => p,
        }
    }

    /// Online prediction; `None` for chance, which is reported analytically.
    pub fn predict(&self, story: &Story) -> anyhow::Result<Option<ThreadAssignment>> {
        Ok(match self {
            Method::Model(m) => Some(unweave_online(m, &story.clips)?.0),
            Method::SingleThread => Some(predict_single_thread(story)?),
            Method::Chance => None,
            Method::Cluster(c) => Some(online_cluster(&story.clips, c)?),
            Method::Predictability(p) => Some(predictability(&story.clips, p)?),
        })
    }
}

/// RI, ΔN and teacher-forcing accuracy of `method` on `stories`.
pub fn evaluate(name: &str, method: &Method, stories: &[Story], workers: usize) -> anyhow::Result<MetricsReport> {
    let results = par_map(workers, stories, |s| {
        Ok(match method.predict(s)? {
            Some(pred) => StoryResult::from_prediction(s, &pred)?,
            None => StoryResult::chance(s)?,
        })
    })?;
    let tfa = tfa(method.predictor(), stories).with_context(|| format!("teacher forcing for {name}"))?;
    Ok(MetricsReport::new(name.into(), results, Some(tfa))?)
}

/// Fitted baselines: clustering threshold and predictability threshold.
pub struct FittedBaselines {
    pub cluster: ClusteringConfig,
    pub predictability: PredictabilityConfig,
}

pub fn fit_baselines(cfg: &RunConfig, val: &[Story]) -> anyhow::Result<FittedBaselines> {
    Ok(FittedBaselines {
        cluster: fit_threshold(val)?,
        predictability: fit_predictability(val, &cfg.eval.predictability)?,
    })
}

/// Reports for every baseline on `stories`.
pub fn baseline_reports(
    fitted: &FittedBaselines,
    stories: &[Story],
    workers: usize,
) -> anyhow::Result<Vec<MetricsReport>> {
    let methods = [
        ("single-thread", Method::SingleThread),
        ("chance", Method::Chance),
        ("online-clustering", Method::Cluster(fitted.cluster)),
        ("predictability", Method::Predictability(fitted.predictability)),
    ];
    methods
        .iter()
        .map(|(name, m)| evaluate(name, m, stories, workers))
        .collect()
}

/// Outcome of the three training regimes from one shared initialisation.
pub struct RegimeModels {
    /// Synthetic-story pretraining only.
    pub ss: Model,
    /// Natural-story finetuning from random init.
    pub as_only: FinetuneOutcome,
    /// Pretraining followed by finetuning.
    pub ss_as: FinetuneOutcome,
    pub pretrain_steps: u64,
}

pub fn run_regimes(
    cfg: &RunConfig,
    world: &World,
    splits: &NaturalSplits,
    observer: &mut dyn TrainObserver,
) -> anyhow::Result<RegimeModels> {
    let init = init_model(cfg)?;
    let streams = pretrain_streams(cfg, world)?;
    let trained = run_pretrain(cfg, init.clone(), streams, observer)?
        .map_err(|f| anyhow::anyhow!("pretraining stopped at step {}: {}", f.step, f.error))?;
    let ss_as = run_finetune(cfg, trained.model.clone(), &splits.train, &splits.val, observer)?;
    let mut as_cfg = cfg.clone();
    // from scratch the pretraining rate is the right scale, not the finetune one
    as_cfg.finetune.lr = cfg.pretrain.schedule.initial;
    let as_only = run_finetune(&as_cfg, init, &splits.train, &splits.val, observer)?;
    Ok(RegimeModels {
        ss: trained.model,
        as_only,
        ss_as,
        pretrain_steps: trained.steps,
    })
}

/// First synthetic story (drawn from `seed`) whose ground truth contains a
/// Continue, a New and a Resume decision.
pub fn story_with_all_scenarios(cfg: &RunConfig, stream: &FeatureStream, seed: u64) -> anyhow::Result<Story> {
    use unweave_core::storygen::sample_synthetic_story;
    use unweave_core::scenario_of;
    let mut synth = cfg.synthetic.clone();
    synth.max_threads = synth.max_threads.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..10_000 {
        let s = sample_synthetic_story(stream, 0, format!("gradcheck-{k}"), &synth, &mut rng)?;
        let y = s.ground_truth()?;
        let mut seen = [false; 3];
        for t in 2..=y.len() {
            seen[scenario_of(y, t)?.index()] = true;
        }
        if seen.iter().all(|&b| b) {
            return Ok(s);
        }
    }
    anyhow::bail!("no synthetic story with all three scenarios in 10000 draws; raise synthetic.clips")
}
