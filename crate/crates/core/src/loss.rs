//! Teacher-forced rollouts and the scenario-weighted focal loss.
//!
//! Under teacher forcing the bank at step `t` is built from the ground-truth
//! decisions `y_1..y_{t-1}`, whatever the controller would have chosen. The
//! loss at step `t ≥ 2` is
//!
//! ```text
//! −α_s · (1 − p_t[y_t])^γ · ln p_t[y_t]
//! ```
//!
//! with `s` the scenario of the ground-truth decision. The first clip has a
//! single option and contributes nothing. A batch loss is the mean of the
//! per-story sums.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::ThreadBank;
use crate::controller::{clip_node, BoundModel, DecisionDistribution, Model};
use crate::error::{Error, Result};
use crate::graph::{focal_value, Graph, NodeId, PROB_FLOOR};
use crate::story::{scenario_of, ClipFeature, Scenario, Story, ThreadAssignment};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha_continue: f64,
    pub alpha_resume: f64,
    pub alpha_new: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_continue: 1.0,
            alpha_resume: 100.0,
            alpha_new: 10.0,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    /// Plain negative log-likelihood: uniform weights, no focusing.
    pub fn nll() -> Self {
        Self {
            alpha_continue: 1.0,
            alpha_resume: 1.0,
            alpha_new: 1.0,
            gamma: 0.0,
        }
    }

    pub fn alpha(&self, s: Scenario) -> f64 {
        match s {
            Scenario::Continue => self.alpha_continue,
            Scenario::New => self.alpha_new,
            Scenario::Resume => self.alpha_resume,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alphas = [self.alpha_continue, self.alpha_resume, self.alpha_new];
        if alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidConfig("scenario weights must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("focal exponent must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FocalLoss {
    pub value: f64,
    /// Steps whose target probability hit the log floor.
    pub saturated: usize,
}

/// Focal loss of one story's decision distributions against its labels.
pub fn focal_loss(dists: &[DecisionDistribution], y: &ThreadAssignment, cfg: &LossConfig) -> Result<FocalLoss> {
    if dists.len() != y.len() {
        return Err(Error::GroundTruthLength {
            labels: y.len(),
            clips: dists.len(),
        });
    }
    let mut out = FocalLoss::default();
    for t in 2..=y.len() {
        let target = y.label(t);
        let d = &dists[t - 1];
        if target > d.len() {
            return Err(Error::DecisionOutOfRange {
                decision: target,
                threads: d.len().saturating_sub(1),
            });
        }
        let p = d.prob(target);
        if p < PROB_FLOOR {
            out.saturated += 1;
        }
        out.value += cfg.alpha(scenario_of(y, t)?) * focal_value(p, cfg.gamma);
    }
    Ok(out)
}

/// Decision distributions under ground-truth bank history.
pub fn teacher_forced_rollout(model: &Model, story: &Story) -> Result<Vec<DecisionDistribution>> {
    let y = story.ground_truth()?;
    check_story(model, story, y)?;
    let mut g = Graph::inference();
    let m = model.bind(&mut g);
    let probs = forced_probs(&mut g, &m, &story.clips, y, false);
    Ok(probs
        .into_iter()
        .map(|p| DecisionDistribution::new(g.value(p).data().to_vec()))
        .collect())
}

fn check_story(model: &Model, story: &Story, y: &ThreadAssignment) -> Result<()> {
    if story.clips.is_empty() {
        return Err(Error::EmptyStory);
    }
    if y.len() != story.len() {
        return Err(Error::GroundTruthLength {
            labels: y.len(),
            clips: story.len(),
        });
    }
    for c in &story.clips {
        model.check_clip(c)?;
    }
    Ok(())
}

/// Builds the forced rollout on `g`; returns each step's `1 × (n+1)` probabilities.
pub(crate) fn forced_probs(
    g: &mut Graph<'_>,
    m: &BoundModel,
    clips: &[ClipFeature],
    y: &ThreadAssignment,
    detach_bank: bool,
) -> Vec<NodeId> {
    let mut bank: ThreadBank<NodeId> = ThreadBank::new();
    let mut out = Vec::with_capacity(clips.len());
    for (clip, &label) in clips.iter().zip(y.labels()) {
        let x = clip_node(g, clip);
        let logits = m.logits(g, x, bank.states());
        out.push(m.probs(g, logits));
        bank.apply_with(label, |prev| {
            let s = m.update(g, x, prev.copied());
            Ok(if detach_bank { g.detach(s) } else { s })
        })
        .expect("canonical labels stay in range");
    }
    out
}

/// Teacher-forced argmax hits per scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCounts {
    pub correct: [usize; 3],
    pub total: [usize; 3],
}

impl ScenarioCounts {
    pub fn record(&mut self, s: Scenario, hit: bool) {
        self.total[s.index()] += 1;
        if hit {
            self.correct[s.index()] += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for i in 0..3 {
            self.correct[i] += other.correct[i];
            self.total[i] += other.total[i];
        }
    }

    /// Fraction correct for `s`, if any decisions of that kind were seen.
    pub fn accuracy(&self, s: Scenario) -> Option<f64> {
        let i = s.index();
        (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let total: usize = self.total.iter().sum();
        (total > 0).then(|| self.correct.iter().sum::<usize>() as f64 / total as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradOptions {
    pub loss: LossConfig,
    /// Stop gradients at every bank write.
    pub detach_bank: bool,
    pub dropout: f64,
}

impl GradOptions {
    pub fn new(loss: LossConfig) -> Self {
        Self {
            loss,
            detach_bank: false,
            dropout: 0.0,
        }
    }
}

/// Loss, gradients and scenario counts of one story (not yet averaged).
#[derive(Clone, Debug, PartialEq)]
pub struct StoryGrads {
    pub loss: f64,
    /// One tensor per parameter, in [`Model::named_params`] order.
    pub grads: Vec<Tensor>,
    pub counts: ScenarioCounts,
    pub saturated: usize,
}

/// Gradient of one story's focal loss. `dropout_seed` drives the masks when
/// `opts.dropout > 0`.
pub fn story_grads(model: &Model, story: &Story, opts: &GradOptions, dropout_seed: u64) -> Result<StoryGrads> {
    let y = story.ground_truth()?;
    check_story(model, story, y)?;
    let mut g = Graph::new();
    if opts.dropout > 0.0 {
        g = g.with_dropout(opts.dropout, ChaCha8Rng::seed_from_u64(dropout_seed));
    }
    let m = model.bind(&mut g);
    let probs = forced_probs(&mut g, &m, &story.clips, y, opts.detach_bank);

    let mut terms = Vec::with_capacity(y.len());
    let mut counts = ScenarioCounts::default();
    let mut saturated = 0;
    for t in 2..=y.len() {
        let s = scenario_of(y, t)?;
        let target = y.label(t);
        let row = g.value(probs[t - 1]).data();
        counts.record(s, crate::controller::decide(row) == target);
        if row[target - 1] < PROB_FLOOR {
            saturated += 1;
        }
        let p = g.pick(probs[t - 1], target - 1);
        let f = g.focal(p, opts.loss.gamma);
        terms.push((f, opts.loss.alpha(s)));
    }
    let total = g.weighted_sum(&terms);
    let loss = g.value(total).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(story.id.clone()));
    }
    let mut back = g.backward(total);
    let grads = g
        .params()
        .iter()
        .map(|&id| {
            back.take(id).unwrap_or_else(|| {
                let (r, c) = g.value(id).shape();
                Tensor::zeros(r, c)
            })
        })
        .collect();
    Ok(StoryGrads {
        loss,
        grads,
        counts,
        saturated,
    })
}

/// Batch-mean loss and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub counts: ScenarioCounts,
    pub saturated: usize,
}

impl BatchGrads {
    /// Averages per-story results, summing in the given order.
    pub fn mean(parts: Vec<StoryGrads>) -> Result<Self> {
        let n = parts.len();
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or(Error::Empty("batch"))?;
        let mut acc = BatchGrads {
            loss: first.loss,
            grads: first.grads,
            counts: first.counts,
            saturated: first.saturated,
        };
        for p in iter {
            acc.loss += p.loss;
            for (a, b) in acc.grads.iter_mut().zip(&p.grads) {
                a.add_assign(b);
            }
            acc.counts.merge(&p.counts);
            acc.saturated += p.saturated;
        }
        let k = 1.0 / n as f64;
        acc.loss *= k;
        for gr in &mut acc.grads {
            gr.scale_assign(k);
        }
        Ok(acc)
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().map(Tensor::sum_sq).sum())
    }
}

/// Batch-mean focal loss and its exact gradients. Story `i` uses dropout
/// seed `dropout_seed + i`.
pub fn loss_and_grads(model: &Model, batch: &[Story], opts: &GradOptions, dropout_seed: u64) -> Result<BatchGrads> {
    let parts = batch
        .iter()
        .enumerate()
        .map(|(i, s)| story_grads(model, s, opts, dropout_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    BatchGrads::mean(parts)
}

/// Batch-mean focal loss without gradients or dropout.
pub fn batch_loss(model: &Model, batch: &[Story], cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for s in batch {
        let dists = teacher_forced_rollout(model, s)?;
        total += focal_loss(&dists, s.ground_truth()?, cfg)?.value;
    }
    Ok(total / batch.len() as f64)
}
