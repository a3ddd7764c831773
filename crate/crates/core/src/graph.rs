//! A small tape for reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. Leaves either
//! borrow their value (parameters, which are then registered for gradient
//! read-out) or own it (inputs and constants). [`Graph::backward`] walks the
//! tape once in reverse from a scalar node.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{dot, Tensor, COSINE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Lower clamp applied to a probability before taking its log in the focal term.
pub const PROB_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Cosine(NodeId, NodeId),
    Pick(NodeId, usize),
    Focal(NodeId, f64),
    WeightedSum(Vec<(NodeId, f64)>),
    Dropout(NodeId, Vec<f64>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

struct DropoutCtx {
    rate: f64,
    rng: ChaCha8Rng,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<NodeId>,
    track_params: bool,
    dropout: Option<DropoutCtx>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph that tracks parameter gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            track_params: true,
            dropout: None,
        }
    }

    /// A graph for pure evaluation: parameters are plain constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Enables inverted dropout at `rate` for every [`Graph::dropout`] call.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some(DropoutCtx { rate, rng });
        }
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Parameter leaves in registration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a borrowed parameter as a leaf.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: self.track_params,
        });
        self.params.push(id);
        id
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A borrowed constant leaf (no gradient).
    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        id
    }

    /// Copies a node's value into a new constant; gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_vec(va.rows(), va.cols(), va.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(bias);
        assert_eq!((1, va.cols()), vb.shape(), "bias shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.map(a, |x| k * x);
        let rg = self.rg(a);
        self.push(v, Op::Affine(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, libm::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with learned `1 × c` scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                c0 += v.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        let cols = v.cols();
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Cosine between the `1 × e` query and each row of `keys`, as a `1 × n` row.
    pub fn cosine(&mut self, query: NodeId, keys: NodeId) -> NodeId {
        let q = self.value(query);
        let k = self.value(keys);
        assert_eq!(q.rows(), 1, "cosine query must be a row");
        assert_eq!(q.cols(), k.cols(), "cosine width mismatch");
        let qn = libm::sqrt(dot(q.data(), q.data())).max(COSINE_EPS);
        let data = (0..k.rows())
            .map(|i| {
                let kr = k.row(i);
                let kn = libm::sqrt(dot(kr, kr)).max(COSINE_EPS);
                dot(q.data(), kr) / (qn * kn)
            })
            .collect();
        let rg = self.rg(query) || self.rg(keys);
        self.push(Tensor::row_vector(data), Op::Cosine(query, keys), rg)
    }

    /// The element at flat index `idx`, as a `1 × 1` node.
    pub fn pick(&mut self, a: NodeId, idx: usize) -> NodeId {
        let v = self.value(a).data()[idx];
        let rg = self.rg(a);
        self.push(Tensor::filled(1, 1, v), Op::Pick(a, idx), rg)
    }

    /// Focal term `-(1 - p)^γ · ln(max(p, PROB_FLOOR))` of a `1 × 1` probability.
    pub fn focal(&mut self, p: NodeId, gamma: f64) -> NodeId {
        let pv = self.value(p).data()[0];
        let v = focal_value(pv, gamma);
        let rg = self.rg(p);
        self.push(Tensor::filled(1, 1, v), Op::Focal(p, gamma), rg)
    }

    /// `Σ wᵢ · xᵢ` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v = terms.iter().map(|&(id, w)| w * self.value(id).data()[0]).sum();
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        self.push(Tensor::filled(1, 1, v), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Inverted dropout if enabled on this graph, otherwise the identity.
    pub fn dropout(&mut self, a: NodeId) -> NodeId {
        let Some(ctx) = self.dropout.as_mut() else {
            return a;
        };
        let keep = 1.0 - ctx.rate;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    /// Reverse pass from the scalar node `root` (seeded with gradient 1).
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(root).shape();
        grads[root.0] = Some(Tensor::filled(r, c, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Affine(a, k) => {
                let mut d = g.clone();
                d.scale_assign(*k);
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = elementwise(g, out, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = elementwise(g, out, |gi, y| gi * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = elementwise(g, self.value(*a), |gi, x| gi * gelu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = dot(gr, y);
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *o = yi * (gi - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let (rows, cols) = xhat.shape();
                if self.rg(*gamma) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, gi), xh) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gi * xh;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for (o, gi) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.rg(*x) {
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dot(&dxhat, xhat.row(r));
                        let inv = inv_std[r];
                        for ((o, d), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv / n * (n * d - sum_d - xh * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut r0 = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let d = g.data()[r0 * cols..(r0 + rows) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(rows, cols, d));
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.rg(p) {
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    c0 += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Cosine(query, keys) => {
                let q = self.value(*query);
                let k = self.value(*keys);
                let qlen = libm::sqrt(dot(q.data(), q.data()));
                let qn = qlen.max(COSINE_EPS);
                let mut dq = Tensor::zeros(1, q.cols());
                let mut dk = Tensor::zeros(k.rows(), k.cols());
                for i in 0..k.rows() {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let kr = k.row(i);
                    let klen = libm::sqrt(dot(kr, kr));
                    let kn = klen.max(COSINE_EPS);
                    let c = out.data()[i];
                    let q_norm_term = if qlen > COSINE_EPS { c / (qn * qn) } else { 0.0 };
                    let k_norm_term = if klen > COSINE_EPS { c / (kn * kn) } else { 0.0 };
                    for j in 0..q.cols() {
                        let (qj, kj) = (q.data()[j], kr[j]);
                        dq.data_mut()[j] += gi * (kj / (qn * kn) - q_norm_term * qj);
                        dk.row_mut(i)[j] += gi * (qj / (qn * kn) - k_norm_term * kj);
                    }
                }
                self.accumulate(grads, *query, dq);
                self.accumulate(grads, *keys, dk);
            }
            Op::Pick(a, idx) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.data_mut()[*idx] = g.data()[0];
                self.accumulate(grads, *a, d);
            }
            Op::Focal(p, gamma) => {
                let pv = self.value(*p).data()[0];
                let d = g.data()[0] * focal_grad(pv, *gamma);
                self.accumulate(grads, *p, Tensor::filled(1, 1, d));
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    self.accumulate(grads, id, Tensor::filled(1, 1, w * g.data()[0]));
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    elementwise(a, b, |x, y| x * y)
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * libm::exp(-0.5 * x * x) * INV_SQRT_2PI
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn focal_value(p: f64, gamma: f64) -> f64 {
    let weight = if gamma == 0.0 { 1.0 } else { libm::pow(1.0 - p, gamma) };
    -weight * libm::log(p.max(PROB_FLOOR))
}

fn focal_grad(p: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    let log_p = libm::log(p.max(PROB_FLOOR));
    let weight = if gamma == 0.0 { 1.0 } else { libm::pow(q, gamma) };
    // d/dp of -(1-p)^γ ln p
    let from_weight = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * libm::pow(q, gamma - 1.0) * log_p
    };
    let from_log = if p >= PROB_FLOOR { -weight / p } else { 0.0 };
    from_weight + from_log
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: &Tensor, build: &dyn Fn(&mut Graph<'_>, NodeId) -> NodeId) {
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let id = g.param(t);
            let out = build(&mut g, id);
            g.value(out).data()[0]
        };
        let mut g = Graph::new();
        let id = g.param(x);
        let out = build(&mut g, id);
        let grads = g.backward(out);
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(x, &f);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + a.abs()), "analytic {a} vs numeric {n}");
        }
    }

    /// Reduces an arbitrary node to a scalar through a fixed random projection.
    fn project(g: &mut Graph<'_>, x: NodeId, seed: u64) -> NodeId {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(&mut rng, r, c));
        let prod = g.mul(x, w);
        let ones = g.constant(Tensor::filled(1, r, 1.0));
        let colsum = g.matmul(ones, prod);
        let ones_c = g.constant(Tensor::filled(1, c, 1.0));
        let s = g.matmul_t(colsum, ones_c);
        g.pick(s, 0)
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 5, 4);
        let b = rand_tensor(&mut rng, 1, 5);

        check(&x, &|g, x| {
            let wi = g.constant(w.clone());
            let y = g.matmul_t(x, wi);
            let bi = g.constant(b.clone());
            let y = g.add_row(y, bi);
            let y = g.gelu(y);
            project(g, y, 7)
        });
        check(&x, &|g, x| {
            let s = g.sigmoid(x);
            let t = g.tanh(x);
            let m = g.mul(s, t);
            let d = g.sub(m, x);
            let y = g.softmax_rows(d);
            project(g, y, 8)
        });
        check(&x, &|g, x| {
            let gamma = g.constant(Tensor::from_vec(1, 4, vec![1.0, 0.5, -0.3, 2.0]));
            let beta = g.constant(Tensor::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]));
            let y = g.layer_norm(x, gamma, beta);
            project(g, y, 9)
        });
        check(&x, &|g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.slice_cols(x, 0, 2);
            let bt = g.slice_rows(b, 0, 2);
            let c = g.concat_cols(&[a, bt]);
            let d = g.concat_rows(&[c, c]);
            let e = g.scale(d, -1.5);
            project(g, e, 10)
        });
        check(&x, &|g, x| {
            let q = g.slice_rows(x, 0, 1);
            let k = g.slice_rows(x, 1, 2);
            let c = g.cosine(q, k);
            project(g, c, 11)
        });
    }

    #[test]
    fn focal_term_gradient() {
        let x = Tensor::from_vec(1, 3, vec![0.3, -0.2, 0.9]);
        for gamma in [0.0, 0.5, 2.0] {
            check(&x, &|g, x| {
                let y = g.scale(x, 1.0 / 0.3);
                let p = g.softmax_rows(y);
                let pk = g.pick(p, 1);
                let f = g.focal(pk, gamma);
                g.weighted_sum(&[(f, 3.0)])
            });
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tensor::filled(1, 2, 1.0);
        let mut g = Graph::new();
        let c = g.constant(t.clone());
        let p = g.param(&t);
        let s = g.add(c, p);
        let out = g.pick(s, 0);
        let grads = g.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_when_disabled() {
        let t = Tensor::filled(2, 2, 3.0);
        let mut g = Graph::new();
        let x = g.param(&t);
        assert_eq!(g.dropout(x), x);

        let mut g = Graph::new().with_dropout(0.5, ChaCha8Rng::seed_from_u64(3));
        let x = g.param(&t);
        let y = g.dropout(x);
        for v in g.value(y).data() {
            assert!(*v == 0.0 || *v == 6.0);
        }
    }
}
