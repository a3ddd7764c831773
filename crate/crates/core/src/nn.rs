//! Trainable layers: linear maps, the gated recurrent cell and a single
//! post-norm transformer encoder layer.
//!
//! Each layer lists its tensors through [`Module`] and binds them onto a
//! [`Graph`] in that same order, so gradients read back from
//! [`Graph::params`] line up with [`Module::params`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub trait Module {
    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>);
    fn params_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor>);
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x Wᵀ + b`, with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / libm::sqrt(in_dim as f64);
        Self {
            weight: uniform(rng, out_dim, in_dim, bound),
            bias: uniform(rng, 1, out_dim, bound),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundLinear {
        BoundLinear {
            weight: g.param(&self.weight),
            bias: g.param(&self.bias),
        }
    }
}

impl Module for Linear {
    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    weight: NodeId,
    bias: NodeId,
}

impl BoundLinear {
    /// Applies the map to every row of `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let y = g.matmul_t(x, self.weight);
        g.add_row(y, self.bias)
    }
}

/// Single-layer gated recurrent cell.
///
/// Gate rows are stacked `[reset, update, candidate]`:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// u  = σ(W_iu x + b_iu + W_hu h + b_hu)
/// c  = tanh(W_ic x + b_ic + r ⊙ (W_hc h + b_hc))
/// h' = u ⊙ c + (1 − u) ⊙ h
/// ```
///
/// so an update gate of 1 replaces the state with the candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

impl GruCell {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, hidden_dim: usize) -> Self {
        let bound = 1.0 / libm::sqrt(hidden_dim as f64);
        Self {
            w_ih: uniform(rng, 3 * hidden_dim, input_dim, bound),
            w_hh: uniform(rng, 3 * hidden_dim, hidden_dim, bound),
            b_ih: uniform(rng, 1, 3 * hidden_dim, bound),
            b_hh: uniform(rng, 1, 3 * hidden_dim, bound),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundGru {
        BoundGru {
            w_ih: g.param(&self.w_ih),
            w_hh: g.param(&self.w_hh),
            b_ih: g.param(&self.b_ih),
            b_hh: g.param(&self.b_hh),
            hidden: self.hidden_dim(),
        }
    }
}

impl Module for GruCell {
    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((join(prefix, "w_ih"), &self.w_ih));
        out.push((join(prefix, "w_hh"), &self.w_hh));
        out.push((join(prefix, "b_ih"), &self.b_ih));
        out.push((join(prefix, "b_hh"), &self.b_hh));
    }

    fn params_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor>) {
        out.push(&mut self.w_ih);
        out.push(&mut self.w_hh);
        out.push(&mut self.b_ih);
        out.push(&mut self.b_hh);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    w_ih: NodeId,
    w_hh: NodeId,
    b_ih: NodeId,
    b_hh: NodeId,
    hidden: usize,
}

impl BoundGru {
    /// One step: `x` is `1 × C`, `h` is `1 × D`.
    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId) -> NodeId {
        let d = self.hidden;
        let gi = g.matmul_t(x, self.w_ih);
        let gi = g.add_row(gi, self.b_ih);
        let gh = g.matmul_t(h, self.w_hh);
        let gh = g.add_row(gh, self.b_hh);

        let ir = g.slice_cols(gi, 0, d);
        let hr = g.slice_cols(gh, 0, d);
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);

        let iu = g.slice_cols(gi, d, d);
        let hu = g.slice_cols(gh, d, d);
        let u = g.add(iu, hu);
        let u = g.sigmoid(u);

        let ic = g.slice_cols(gi, 2 * d, d);
        let hc = g.slice_cols(gh, 2 * d, d);
        let gated = g.mul(r, hc);
        let c = g.add(ic, gated);
        let c = g.tanh(c);

        // h + u ⊙ (c − h)
        let diff = g.sub(c, h);
        let step = g.mul(u, diff);
        g.add(h, step)
    }
}

/// One transformer encoder layer (post-norm, GELU feed-forward, no
/// positional encoding):
///
/// ```text
/// a   = MultiHead(x)          heads split the model dim evenly
/// x1  = LayerNorm(x + Drop(a))
/// f   = W2 · Drop(GELU(W1 · x1 + b1)) + b2
/// out = LayerNorm(x1 + Drop(f))
/// ```
///
/// Dropout also applies to the attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub heads: usize,
    pub query: Linear,
    /// Keys carry no bias: it would shift every score in a row equally.
    pub key: Tensor,
    pub value: Linear,
    pub output: Linear,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

impl EncoderLayer {
    /// Panics unless `model_dim` is divisible by `heads`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, model_dim: usize, heads: usize, ff_dim: usize) -> Self {
        assert!(heads > 0 && model_dim.is_multiple_of(heads), "model dim must split across heads");
        Self {
            heads,
            query: Linear::init(rng, model_dim, model_dim),
            key: uniform(rng, model_dim, model_dim, 1.0 / libm::sqrt(model_dim as f64)),
            value: Linear::init(rng, model_dim, model_dim),
            output: Linear::init(rng, model_dim, model_dim),
            norm1_gain: Tensor::filled(1, model_dim, 1.0),
            norm1_bias: Tensor::zeros(1, model_dim),
            ff1: Linear::init(rng, model_dim, ff_dim),
            ff2: Linear::init(rng, ff_dim, model_dim),
            norm2_gain: Tensor::filled(1, model_dim, 1.0),
            norm2_bias: Tensor::zeros(1, model_dim),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundEncoder {
        BoundEncoder {
            heads: self.heads,
            query: self.query.bind(g),
            key: g.param(&self.key),
            value: self.value.bind(g),
            output: self.output.bind(g),
            norm1_gain: g.param(&self.norm1_gain),
            norm1_bias: g.param(&self.norm1_bias),
            ff1: self.ff1.bind(g),
            ff2: self.ff2.bind(g),
            norm2_gain: g.param(&self.norm2_gain),
            norm2_bias: g.param(&self.norm2_bias),
        }
    }
}

impl Module for EncoderLayer {
    fn params<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        self.query.params(&join(prefix, "query"), out);
        out.push((join(prefix, "key_weight"), &self.key));
        self.value.params(&join(prefix, "value"), out);
        self.output.params(&join(prefix, "output"), out);
        out.push((join(prefix, "norm1_gain"), &self.norm1_gain));
        out.push((join(prefix, "norm1_bias"), &self.norm1_bias));
        self.ff1.params(&join(prefix, "ff1"), out);
        self.ff2.params(&join(prefix, "ff2"), out);
        out.push((join(prefix, "norm2_gain"), &self.norm2_gain));
        out.push((join(prefix, "norm2_bias"), &self.norm2_bias));
    }

    fn params_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor>) {
        self.query.params_mut(out);
        out.push(&mut self.key);
        self.value.params_mut(out);
        self.output.params_mut(out);
        out.push(&mut self.norm1_gain);
        out.push(&mut self.norm1_bias);
        self.ff1.params_mut(out);
        self.ff2.params_mut(out);
        out.push(&mut self.norm2_gain);
        out.push(&mut self.norm2_bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    heads: usize,
    query: BoundLinear,
    key: NodeId,
    value: BoundLinear,
    output: BoundLinear,
    norm1_gain: NodeId,
    norm1_bias: NodeId,
    ff1: BoundLinear,
    ff2: BoundLinear,
    norm2_gain: NodeId,
    norm2_bias: NodeId,
}

impl BoundEncoder {
    /// Encodes an `n × E` sequence.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let dim = g.value(x).cols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);

        let q = self.query.forward(g, x);
        let k = g.matmul_t(x, self.key);
        let v = self.value.forward(g, x);
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            let weights = g.dropout(weights);
            per_head.push(g.matmul(weights, vh));
        }
        let joined = if per_head.len() == 1 {
            per_head[0]
        } else {
            g.concat_cols(&per_head)
        };
        let attn = self.output.forward(g, joined);
        let attn = g.dropout(attn);
        let res = g.add(x, attn);
        let x1 = g.layer_norm(res, self.norm1_gain, self.norm1_bias);

        let hidden = self.ff1.forward(g, x1);
        let hidden = g.gelu(hidden);
        let hidden = g.dropout(hidden);
        let ff = self.ff2.forward(g, hidden);
        let ff = g.dropout(ff);
        let res = g.add(x1, ff);
        g.layer_norm(res, self.norm2_gain, self.norm2_bias)
    }
}
