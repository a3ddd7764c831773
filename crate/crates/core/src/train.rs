//! Pretraining on generated stories and finetuning with early stopping.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{unweave_online, Model};
use crate::error::{Error, Result};
use crate::loss::{loss_and_grads, GradOptions, LossConfig, ScenarioCounts};
use crate::metrics::mean_rand_index;
use crate::nn::Module;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState, LrSchedule};
use crate::story::Story;
use crate::storygen::{sample_synthetic_story, FeatureStream, SynthStoryConfig};

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `stream` of `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(master ^ mix(stream))
}

/// Supplies labelled training batches.
pub trait BatchSource {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Story>>;
}

/// Fresh synthetic stories drawn from a fixed set of streams.
pub struct SyntheticBatches {
    streams: Vec<FeatureStream>,
    cfg: SynthStoryConfig,
    rng: ChaCha8Rng,
    drawn: u64,
}

impl SyntheticBatches {
    pub fn new(streams: Vec<FeatureStream>, cfg: SynthStoryConfig, seed: u64) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Empty("stream set"));
        }
        cfg.validate()?;
        Ok(Self {
            streams,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drawn: 0,
        })
    }
}

impl BatchSource for SyntheticBatches {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Story>> {
        (0..size)
            .map(|_| {
                let k = self.rng.random_range(0..self.streams.len());
                let id = format!("syn{}", self.drawn);
                self.drawn += 1;
                sample_synthetic_story(&self.streams[k], k as u64, id, &self.cfg, &mut self.rng)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global-norm gradient clipping; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Stop gradients at bank writes.
    #[serde(default)]
    pub detach_bank: bool,
    /// Checkpoint callback period in steps (0 disables it).
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// 2k steps of batch 16, learning rate 1e-3 dropped to 2e-4 halfway.
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            schedule: LrSchedule::two_phase(1e-3, 1000, 2e-4),
            dropout: 0.1,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: None,
            detach_bank: false,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        self.schedule.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based count of completed steps.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub counts: ScenarioCounts,
    pub saturated: usize,
}

/// Hooks called by the training loops.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_checkpoint(&mut self, _step: u64, _model: &Model, _adam: &AdamState) {}
    fn on_eval(&mut self, _step: u64, _val_ri: f64) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: Model,
    pub adam: AdamState,
    pub steps: u64,
}

/// A training run that stopped on an error; `last_good` holds the parameters
/// before the failing step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: u64,
    pub last_good: Box<Trained>,
}

fn params_of(model: &Model) -> Vec<&crate::tensor::Tensor> {
    model.named_params().into_iter().map(|(_, t)| t).collect()
}

fn apply_update(model: &mut Model, grads: &[crate::tensor::Tensor], adam: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let mut ps = Vec::new();
    model.params_mut(&mut ps);
    adam_step(&mut ps, grads, adam, lr, cfg)
}

/// Runs `cfg.steps` optimiser steps on batches from `source`. `seed` drives
/// dropout masks.
pub fn pretrain(
    model: Model,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> core::result::Result<Trained, TrainFailure> {
    let adam = AdamState::for_params(&params_of(&model));
    resume_training(
        Trained {
            model,
            adam,
            steps: 0,
        },
        source,
        cfg,
        seed,
        observer,
    )
}

/// Continues a run from `state.steps` up to `cfg.steps`.
pub fn resume_training(
    mut state: Trained,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> core::result::Result<Trained, TrainFailure> {
    let fail = |error: Error, state: Trained| TrainFailure {
        error,
        step: state.steps,
        last_good: Box::new(state),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, state));
    }
    let opts = GradOptions {
        loss: cfg.loss,
        detach_bank: cfg.detach_bank,
        dropout: cfg.dropout,
    };
    while state.steps < cfg.steps {
        let step = state.steps;
        let batch = match source.next_batch(cfg.batch_size) {
            Ok(b) => b,
            Err(e) => return Err(fail(e, state)),
        };
        let mut bg = match loss_and_grads(&state.model, &batch, &opts, derive_seed(seed, step)) {
            Ok(g) => g,
            Err(e) => return Err(fail(e, state)),
        };
        if !bg.loss.is_finite() || bg.grads.iter().any(|g| !g.is_finite()) {
            return Err(fail(Error::NonFiniteLoss(format!("batch at step {step}")), state));
        }
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut bg.grads, c),
            None => bg.global_norm(),
        };
        let lr = cfg.schedule.lr_at(step);
        if let Err(e) = apply_update(&mut state.model, &bg.grads, &mut state.adam, lr, &cfg.adam) {
            return Err(fail(e, state));
        }
        state.steps += 1;
        observer.on_step(&StepRecord {
            step: state.steps,
            loss: bg.loss,
            lr,
            grad_norm,
            counts: bg.counts,
            saturated: bg.saturated,
        });
        if cfg.checkpoint_every > 0 && state.steps.is_multiple_of(cfg.checkpoint_every) {
            observer.on_checkpoint(state.steps, &state.model, &state.adam);
        }
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Validate every this many steps.
    pub eval_every: u64,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        Self {
            max_steps: 1000,
            batch_size: 16,
            lr: 5e-4,
            eval_every: 50,
            patience: 8,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    /// Parameters with the best validation RI seen.
    pub model: Model,
    pub best_val_ri: f64,
    pub best_step: u64,
    pub steps_run: u64,
    /// `(step, val RI)` for every evaluation, starting with step 0.
    pub evals: Vec<(u64, f64)>,
}

/// Mean RI of greedy online unweaving over `stories`.
pub fn validation_ri(model: &Model, stories: &[Story]) -> Result<f64> {
    mean_rand_index(stories, |s| unweave_online(model, &s.clips).map(|(y, _)| y))
}

/// Trains on `train` without dropout, keeping the parameters with the best
/// validation RI and stopping once `patience` evaluations in a row fail to
/// improve on it. `seed` drives the batch order.
pub fn finetune(
    model: Model,
    train: &[Story],
    val: &[Story],
    cfg: &FinetuneConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    cfg.validate()?;
    let opts = GradOptions::new(cfg.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut current = model;
    let mut adam = AdamState::for_params(&params_of(&current));
    let mut best_ri = validation_ri(&current, val)?;
    observer.on_eval(0, best_ri);
    let mut best = current.clone();
    let mut best_step = 0;
    let mut evals = alloc::vec![(0, best_ri)];
    let mut bad = 0;
    let mut step = 0;
    while step < cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let mut bg = loss_and_grads(&current, &batch, &opts, 0)?;
        if !bg.loss.is_finite() || bg.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("finetune batch at step {step}")));
        }
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut bg.grads, c),
            None => bg.global_norm(),
        };
        apply_update(&mut current, &bg.grads, &mut adam, cfg.lr, &cfg.adam)?;
        step += 1;
        observer.on_step(&StepRecord {
            step,
            loss: bg.loss,
            lr: cfg.lr,
            grad_norm,
            counts: bg.counts,
            saturated: bg.saturated,
        });
        if step % cfg.eval_every == 0 {
            let ri = validation_ri(&current, val)?;
            observer.on_eval(step, ri);
            evals.push((step, ri));
            if ri > best_ri {
                best_ri = ri;
                best = current.clone();
                best_step = step;
                bad = 0;
            } else {
                bad += 1;
                if bad > cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(FinetuneOutcome {
        model: best,
        best_val_ri: best_ri,
        best_step,
        steps_run: step,
        evals,
    })
}
