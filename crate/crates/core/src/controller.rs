//! The neural controller and thread-update rules, plus online unweaving.
//!
//! A [`Model`] bundles the clip/thread embedders, the selection head (linear
//! threshold or transformer with a new-thread token) and the update rule.
//! Everything runs on a [`Graph`]: inference uses a non-tracking graph, the
//! trainer uses a tracking one over the same code path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::bank::{ThreadBank, ThreadUpdater};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{uniform, BoundEncoder, BoundGru, BoundLinear, EncoderLayer, GruCell, Linear, Module};
use crate::story::{ClipFeature, ThreadAssignment};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Linear,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Gru,
    LastClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub controller: ControllerKind,
    pub update: UpdateKind,
    /// Clip feature dimension `C`.
    pub clip_dim: usize,
    /// Thread state dimension `D`.
    pub state_dim: usize,
    /// Embedding dimension `E` (the encoder's model dimension).
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub temperature: f64,
    /// Learn the empty-thread state instead of fixing it at zero.
    #[serde(default)]
    pub learned_empty_state: bool,
}

impl ModelConfig {
    /// Small dimensions for CPU-scale runs.
    pub fn desk(controller: ControllerKind, update: UpdateKind) -> Self {
        Self {
            controller,
            update,
            clip_dim: 32,
            state_dim: 32,
            embed_dim: match controller {
                ControllerKind::Linear => 32,
                ControllerKind::Transformer => 64,
            },
            heads: 4,
            ff_dim: 128,
            temperature: 0.05,
            learned_empty_state: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::BadTemperature(self.temperature));
        }
        if self.clip_dim == 0 || self.state_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if self.controller == ControllerKind::Transformer
            && (self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) || self.ff_dim == 0)
        {
            return Err(Error::InvalidConfig(
                "embed_dim must be a positive multiple of heads and ff_dim positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum SelectHead {
    /// `l_nt`: the new-thread logit, a learned similarity threshold.
    Linear { new_thread_logit: Tensor },
    Transformer {
        new_thread_token: Tensor,
        encoder: EncoderLayer,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Gru(GruCell),
    /// The state is a projection of the latest clip alone.
    LastClip(Linear),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub psi_clip: Linear,
    pub psi_thread: Linear,
    pub head: SelectHead,
    pub update: UpdateRule,
    /// Learned empty-thread state; `None` means zeros.
    pub empty_state: Option<Tensor>,
}

/// Starting value of the learned new-thread logit.
const INITIAL_NEW_THREAD_LOGIT: f64 = 0.5;

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.clip_dim;
        let d = config.state_dim;
        let e = config.embed_dim;
        let psi_clip = Linear::init(rng, c, e);
        let psi_thread = Linear::init(rng, d, e);
        let head = match config.controller {
            ControllerKind::Linear => SelectHead::Linear {
                new_thread_logit: Tensor::filled(1, 1, INITIAL_NEW_THREAD_LOGIT),
            },
            ControllerKind::Transformer => SelectHead::Transformer {
                new_thread_token: uniform(rng, 1, e, 1.0),
                encoder: EncoderLayer::init(rng, e, config.heads, config.ff_dim),
            },
        };
        let update = match config.update {
            UpdateKind::Gru => UpdateRule::Gru(GruCell::init(rng, c, d)),
            UpdateKind::LastClip => UpdateRule::LastClip(Linear::init(rng, c, d)),
        };
        let empty_state = config.learned_empty_state.then(|| Tensor::zeros(1, d));
        Ok(Self {
            config,
            psi_clip,
            psi_thread,
            head,
            update,
            empty_state,
        })
    }

    /// Checks a deserialized model: valid config, every parameter present
    /// with the shape `init` would give it, all values finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let template = Self::init(self.config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let ours = self.named_params();
        let want = template.named_params();
        if ours.len() != want.len() {
            return Err(Error::InvalidConfig(format!(
                "model has {} parameter tensors, config implies {}",
                ours.len(),
                want.len()
            )));
        }
        for ((name, t), (want_name, w)) in ours.iter().zip(&want) {
            if name != want_name || t.shape() != w.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} {:?} does not match {want_name} {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    /// Parameter tensors with dotted names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `g` in [`Model::named_params`] order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundModel {
        let psi_clip = self.psi_clip.bind(g);
        let psi_thread = self.psi_thread.bind(g);
        let head = match &self.head {
            SelectHead::Linear { new_thread_logit } => BoundHead::Linear(g.param(new_thread_logit)),
            SelectHead::Transformer {
                new_thread_token,
                encoder,
            } => BoundHead::Transformer {
                token: g.param(new_thread_token),
                encoder: encoder.bind(g),
            },
        };
        let update = match &self.update {
            UpdateRule::Gru(cell) => BoundUpdate::Gru(cell.bind(g)),
            UpdateRule::LastClip(lin) => BoundUpdate::LastClip(lin.bind(g)),
        };
        let empty_state = match &self.empty_state {
            Some(t) => g.param(t),
            None => g.constant(Tensor::zeros(1, self.config.state_dim)),
        };
        BoundModel {
            psi_clip,
            psi_thread,
            head,
            update,
            empty_state,
            inv_temperature: 1.0 / self.config.temperature,
        }
    }

    pub(crate) fn check_clip(&self, clip: &ClipFeature) -> Result<()> {
        clip.check_dim(self.config.clip_dim)
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.config.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.state_dim,
                got: state.len(),
            });
        }
        Ok(())
    }

    /// Logits over `[thread 1, …, thread n̂, new thread]` for `clip` against `bank`.
    pub fn logits(&self, clip: &ClipFeature, bank: &ThreadBank) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        for s in bank.states() {
            self.check_state(s)?;
        }
        let mut g = Graph::inference();
        let m = self.bind(&mut g);
        let x = clip_node(&mut g, clip);
        let states: Vec<NodeId> = bank
            .states()
            .iter()
            .map(|s| g.constant(Tensor::row_vector(s.clone())))
            .collect();
        let l = m.logits(&mut g, x, &states);
        Ok(g.value(l).data().to_vec())
    }

    /// Decision distribution for `clip` against `bank`.
    pub fn decide(&self, clip: &ClipFeature, bank: &ThreadBank) -> Result<DecisionDistribution> {
        let logits = self.logits(clip, bank)?;
        let probs = softmax_with_temperature(&logits, self.config.temperature)?;
        Ok(DecisionDistribution::new(probs))
    }
}

impl Module for Model {
    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        let _ = prefix;
        self.psi_clip.params("psi_clip", out);
        self.psi_thread.params("psi_thread", out);
        match &self.head {
            SelectHead::Linear { new_thread_logit } => {
                out.push(("new_thread_logit".into(), new_thread_logit));
            }
            SelectHead::Transformer {
                new_thread_token,
                encoder,
            } => {
                out.push(("new_thread_token".into(), new_thread_token));
                encoder.params("encoder", out);
            }
        }
        match &self.update {
            UpdateRule::Gru(cell) => cell.params("gru", out),
            UpdateRule::LastClip(lin) => lin.params("last_clip", out),
        }
        if let Some(t) = &self.empty_state {
            out.push(("empty_state".into(), t));
        }
    }

    fn params_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor>) {
        self.psi_clip.params_mut(out);
        self.psi_thread.params_mut(out);
        match &mut self.head {
            SelectHead::Linear { new_thread_logit } => out.push(new_thread_logit),
            SelectHead::Transformer {
                new_thread_token,
                encoder,
            } => {
                out.push(new_thread_token);
                encoder.params_mut(out);
            }
        }
        match &mut self.update {
            UpdateRule::Gru(cell) => cell.params_mut(out),
            UpdateRule::LastClip(lin) => lin.params_mut(out),
        }
        if let Some(t) = &mut self.empty_state {
            out.push(t);
        }
    }
}

impl ThreadUpdater for Model {
    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn empty_state(&self) -> Vec<f64> {
        match &self.empty_state {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; self.config.state_dim],
        }
    }

    fn update(&self, clip: &ClipFeature, state: &[f64]) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        self.check_state(state)?;
        let mut g = Graph::inference();
        let m = self.bind(&mut g);
        let x = clip_node(&mut g, clip);
        let h = g.constant(Tensor::row_vector(state.to_vec()));
        let out = m.update(&mut g, x, Some(h));
        Ok(g.value(out).data().to_vec())
    }
}

pub(crate) fn clip_node(g: &mut Graph<'_>, clip: &ClipFeature) -> NodeId {
    g.constant(Tensor::row_vector(clip.values().to_vec()))
}

#[derive(Clone, Copy, Debug)]
enum BoundHead {
    Linear(NodeId),
    Transformer { token: NodeId, encoder: BoundEncoder },
}

#[derive(Clone, Copy, Debug)]
enum BoundUpdate {
    Gru(BoundGru),
    LastClip(BoundLinear),
}

/// A [`Model`] whose parameters live on a particular graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    psi_clip: BoundLinear,
    psi_thread: BoundLinear,
    head: BoundHead,
    update: BoundUpdate,
    empty_state: NodeId,
    inv_temperature: f64,
}

impl BoundModel {
    /// Selection logits (`1 × (n̂+1)`) for clip `x` (`1 × C`) against thread states (`1 × D` each).
    pub fn logits(&self, g: &mut Graph<'_>, x: NodeId, states: &[NodeId]) -> NodeId {
        let clip = self.psi_clip.forward(g, x);
        let threads = if states.is_empty() {
            None
        } else {
            let z = g.concat_rows(states);
            Some(self.psi_thread.forward(g, z))
        };
        match self.head {
            BoundHead::Linear(l_nt) => match threads {
                None => l_nt,
                Some(t) => {
                    let cos = g.cosine(clip, t);
                    g.concat_cols(&[cos, l_nt])
                }
            },
            BoundHead::Transformer { token, encoder } => {
                let mut seq = vec![clip];
                seq.extend(threads);
                seq.push(token);
                let seq = g.concat_rows(&seq);
                let out = encoder.forward(g, seq);
                let n = states.len();
                let query = g.slice_rows(out, 0, 1);
                let keys = g.slice_rows(out, 1, n + 1);
                g.cosine(query, keys)
            }
        }
    }

    /// Temperature softmax over logits.
    pub fn probs(&self, g: &mut Graph<'_>, logits: NodeId) -> NodeId {
        let scaled = g.scale(logits, self.inv_temperature);
        g.softmax_rows(scaled)
    }

    /// Folds clip `x` into `state`, or into the empty-thread state when `None`.
    pub fn update(&self, g: &mut Graph<'_>, x: NodeId, state: Option<NodeId>) -> NodeId {
        match self.update {
            BoundUpdate::Gru(cell) => {
                let h = state.unwrap_or(self.empty_state);
                cell.step(g, x, h)
            }
            BoundUpdate::LastClip(lin) => lin.forward(g, x),
        }
    }
}

/// Probabilities over the `n̂ + 1` options and the argmax decision (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionDistribution {
    pub probs: Vec<f64>,
    pub chosen: usize,
}

impl DecisionDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        let chosen = decide(&probs);
        Self { probs, chosen }
    }

    /// Probability of 1-based option `i`.
    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i - 1]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `exp(l_i/τ) / Σ_j exp(l_j/τ)`, max-subtracted.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::BadTemperature(tau));
    }
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut p: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    crate::graph::softmax_in_place(&mut p);
    Ok(p)
}

/// 1-based argmax; ties go to the lowest index.
pub fn decide(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best + 1
}

/// Folds `clip` into `state` with the model's update rule.
pub fn update_thread(model: &Model, clip: &ClipFeature, state: &[f64]) -> Result<Vec<f64>> {
    model.update(clip, state)
}

/// Assigns each clip to a thread as it arrives, greedily.
pub fn unweave_online(
    model: &Model,
    clips: &[ClipFeature],
) -> Result<(ThreadAssignment, Vec<DecisionDistribution>)> {
    if clips.is_empty() {
        return Err(Error::EmptyStory);
    }
    for c in clips {
        model.check_clip(c)?;
    }
    let mut g = Graph::inference();
    let m = model.bind(&mut g);
    let mut bank: ThreadBank<NodeId> = ThreadBank::new();
    let mut labels = Vec::with_capacity(clips.len());
    let mut dists = Vec::with_capacity(clips.len());
    for clip in clips {
        let x = clip_node(&mut g, clip);
        let logits = m.logits(&mut g, x, bank.states());
        let logits = g.value(logits).data().to_vec();
        let dist = DecisionDistribution::new(softmax_with_temperature(&logits, model.temperature())?);
        bank.apply_with(dist.chosen, |prev| Ok(m.update(&mut g, x, prev.copied())))?;
        labels.push(dist.chosen);
        dists.push(dist);
    }
    Ok((ThreadAssignment::from_canonical(labels)?, dists))
}
