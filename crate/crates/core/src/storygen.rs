//! Synthetic feature worlds, synthetic-story weaving and natural-story
//! extraction.
//!
//! A [`World`] fixes one unit centroid per latent activity, a drift direction
//! for each, and a low-rank "scene" subspace. A [`FeatureStream`] walks
//! through activity segments; the feature at each timestep is
//!
//! ```text
//! normalize( rot(μ_a, d_a, drift·τ_a) + U·w_scene + noise )
//! ```
//!
//! where `τ_a` is the time activity `a` has been active so far in the
//! stream, `rot` turns the centroid towards its drift direction by that
//! angle, and `w_scene` is a piecewise-constant nuisance shared by whatever
//! activity is running.
//!
//! Synthetic stories draw `n` thread spans far apart in a stream and
//! interleave their clips with a random template; natural stories slice a
//! contiguous window and label clips by their latent activity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::story::{canonicalize, ClipFeature, Provenance, Story, ThreadAssignment};
use crate::tensor::{dot, normalize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Feature dimension `C`.
    pub feature_dim: usize,
    /// Number of latent activities `K`.
    pub activities: usize,
    /// Shortest activity segment, in timesteps.
    pub min_dwell: usize,
    /// Mean segment length; the excess over `min_dwell` is geometric.
    pub mean_dwell: f64,
    /// Chance that the next segment returns to a recently active activity.
    pub resume_prob: f64,
    /// How many previous activities count as recent.
    pub recent_window: usize,
    /// Norm of the isotropic per-timestep noise.
    pub noise: f64,
    /// Centroid rotation per timestep of activity, in radians.
    pub drift: f64,
    /// Dimension of the scene subspace (0 disables it).
    pub scene_rank: usize,
    /// Norm of the scene component.
    pub scene_scale: f64,
    /// Mean duration of one scene, in timesteps.
    pub scene_dwell: f64,
    pub stream_len: usize,
}

impl WorldConfig {
    pub fn desk() -> Self {
        Self {
            feature_dim: 32,
            activities: 48,
            min_dwell: 120,
            mean_dwell: 220.0,
            resume_prob: 0.3,
            recent_window: 2,
            noise: 0.6,
            drift: 0.002,
            scene_rank: 8,
            scene_scale: 1.2,
            scene_dwell: 100.0,
            stream_len: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.feature_dim == 0 || self.stream_len == 0 {
            return bad("feature_dim and stream_len must be positive");
        }
        if self.activities < 2 {
            return bad("need at least two activities");
        }
        if self.min_dwell == 0 || !(self.mean_dwell >= self.min_dwell as f64) {
            return bad("mean_dwell must be at least min_dwell ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.resume_prob) {
            return bad("resume_prob must lie in [0, 1]");
        }
        if self.scene_rank > self.feature_dim {
            return bad("scene_rank cannot exceed feature_dim");
        }
        if !(self.scene_dwell >= 1.0) {
            return bad("scene_dwell must be at least 1");
        }
        for v in [self.noise, self.drift, self.scene_scale] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("noise, drift and scene_scale must be non-negative");
            }
        }
        Ok(())
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if crate::tensor::norm(&v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

/// Unit vector orthogonal to `u` (Gram–Schmidt on a random draw).
fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, u.len());
        let p = dot(&v, u);
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= p * ui;
        }
        if crate::tensor::norm(&v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

/// The fixed part of a synthetic world, shared by all of its streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub centroids: Vec<Vec<f64>>,
    pub drift_dirs: Vec<Vec<f64>>,
    /// Orthonormal scene basis, one vector per row.
    pub scene_basis: Vec<Vec<f64>>,
}

impl World {
    pub fn sample<R: Rng + ?Sized>(config: WorldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.feature_dim;
        let centroids: Vec<Vec<f64>> = (0..config.activities).map(|_| random_unit(rng, c)).collect();
        let drift_dirs = centroids.iter().map(|mu| random_orthogonal(rng, mu)).collect();
        let mut scene_basis: Vec<Vec<f64>> = Vec::with_capacity(config.scene_rank);
        while scene_basis.len() < config.scene_rank {
            let mut v = random_unit(rng, c);
            for b in &scene_basis {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
            if crate::tensor::norm(&v) > 1e-6 {
                normalize(&mut v);
                scene_basis.push(v);
            }
        }
        Ok(Self {
            config,
            centroids,
            drift_dirs,
            scene_basis,
        })
    }

    /// Noise-free, scene-free signal of activity `a` after `active` timesteps.
    pub fn signal(&self, a: usize, active: usize) -> Vec<f64> {
        let theta = self.config.drift * active as f64;
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        self.centroids[a]
            .iter()
            .zip(&self.drift_dirs[a])
            .map(|(m, d)| c * m + s * d)
            .collect()
    }

    fn next_activity<R: Rng + ?Sized>(&self, history: &[usize], rng: &mut R) -> usize {
        let k = self.config.activities;
        let current = history.last().copied();
        let recent: Vec<usize> = history
            .iter()
            .rev()
            .skip(1)
            .take(self.config.recent_window)
            .copied()
            .filter(|&a| Some(a) != current)
            .collect();
        if !recent.is_empty() && rng.random::<f64>() < self.config.resume_prob {
            return recent[rng.random_range(0..recent.len())];
        }
        loop {
            let a = rng.random_range(0..k);
            if Some(a) != current {
                return a;
            }
        }
    }

    /// Generates a stream of `len` timesteps.
    pub fn stream<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<FeatureStream> {
        let cfg = &self.config;
        let c = cfg.feature_dim;
        let dwell_extra = cfg.mean_dwell - cfg.min_dwell as f64;
        let dwell_geo = if dwell_extra > 0.0 {
            Some(Geometric::new(1.0 / (dwell_extra + 1.0)).map_err(|_| Error::InvalidConfig("mean_dwell".into()))?)
        } else {
            None
        };
        let scene_geo =
            Geometric::new(1.0 / cfg.scene_dwell).map_err(|_| Error::InvalidConfig("scene_dwell".into()))?;
        let noise_sd = cfg.noise / libm::sqrt(c as f64);
        let scene_sd = if cfg.scene_rank > 0 {
            cfg.scene_scale / libm::sqrt(cfg.scene_rank as f64)
        } else {
            0.0
        };

        let mut features = Vec::with_capacity(len * c);
        let mut latent = Vec::with_capacity(len);
        let mut segments = Vec::new();
        let mut history: Vec<usize> = Vec::new();
        let mut active_time = vec![0usize; cfg.activities];
        let mut scene = vec![0.0; c];
        let mut scene_left = 0u64;
        let mut t = 0;
        while t < len {
            let a = self.next_activity(&history, rng);
            history.push(a);
            let dwell = cfg.min_dwell + dwell_geo.as_ref().map_or(0, |g| g.sample(rng) as usize);
            let seg_len = dwell.min(len - t);
            segments.push(Segment {
                start: t,
                len: seg_len,
                activity: a,
            });
            for _ in 0..seg_len {
                if scene_left == 0 {
                    scene.iter_mut().for_each(|v| *v = 0.0);
                    for b in &self.scene_basis {
                        let w: f64 = StandardNormal.sample(rng);
                        for (s, bi) in scene.iter_mut().zip(b) {
                            *s += scene_sd * w * bi;
                        }
                    }
                    scene_left = 1 + scene_geo.sample(rng);
                }
                scene_left -= 1;
                let mut x = self.signal(a, active_time[a]);
                for (xi, si) in x.iter_mut().zip(&scene) {
                    let n: f64 = StandardNormal.sample(rng);
                    *xi += si + noise_sd * n;
                }
                normalize(&mut x);
                features.extend_from_slice(&x);
                latent.push(a);
                active_time[a] += 1;
            }
            t += seg_len;
        }
        Ok(FeatureStream {
            dim: c,
            features,
            latent,
            segments,
        })
    }
}

/// World plus one stream of `cfg.stream_len` timesteps.
pub fn generate_stream<R: Rng + ?Sized>(cfg: &WorldConfig, rng: &mut R) -> Result<FeatureStream> {
    let world = World::sample(cfg.clone(), rng)?;
    world.stream(cfg.stream_len, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub activity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    dim: usize,
    features: Vec<f64>,
    latent: Vec<usize>,
    segments: Vec<Segment>,
}

impl FeatureStream {
    pub fn from_parts(dim: usize, features: Vec<f64>, latent: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * latent.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * latent.len(),
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut segments: Vec<Segment> = Vec::new();
        for (t, &a) in latent.iter().enumerate() {
            match segments.last_mut() {
                Some(s) if s.activity == a => s.len += 1,
                _ => segments.push(Segment {
                    start: t,
                    len: 1,
                    activity: a,
                }),
            }
        }
        Ok(Self {
            dim,
            features,
            latent,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, t: usize) -> &[f64] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn latent(&self) -> &[usize] {
        &self.latent
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Renormalised mean of timesteps `start..start+len`.
    pub fn clip_feature(&self, start: usize, len: usize) -> ClipFeature {
        let mut v = vec![0.0; self.dim];
        for t in start..start + len {
            for (a, b) in v.iter_mut().zip(self.feature(t)) {
                *a += b;
            }
        }
        normalize(&mut v);
        ClipFeature::new(v).expect("stream features are finite")
    }

    /// Most frequent latent id over the clip; ties go to the one seen first.
    pub fn clip_latent(&self, start: usize, len: usize) -> usize {
        let ids = &self.latent[start..start + len];
        let mut best = ids[0];
        let mut best_count = 0;
        for (i, &a) in ids.iter().enumerate() {
            if ids[..i].contains(&a) {
                continue;
            }
            let count = ids.iter().filter(|&&b| b == a).count();
            if count > best_count {
                best = a;
                best_count = count;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStoryConfig {
    /// Clips per story `T`.
    pub clips: usize,
    /// Most threads per story `N_max`.
    pub max_threads: usize,
    /// Timesteps per clip.
    pub clip_len: usize,
    pub gap_min: usize,
    pub gap_max: usize,
    /// Least distance between the end of one thread's span and the start of the next.
    pub separation: usize,
    /// Streams shorter than this are refused.
    pub min_stream_len: usize,
}

impl SynthStoryConfig {
    pub fn desk() -> Self {
        Self {
            clips: 10,
            max_threads: 4,
            clip_len: 4,
            gap_min: 8,
            gap_max: 16,
            separation: 240,
            min_stream_len: 840,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.max_threads == 0 || self.clips < self.max_threads {
            return bad("need clips ≥ max_threads ≥ 1");
        }
        if self.clip_len == 0 {
            return bad("clip_len must be positive");
        }
        if self.gap_min > self.gap_max {
            return bad("gap_min must not exceed gap_max");
        }
        if self.separation <= self.gap_max {
            return bad("separation must exceed gap_max");
        }
        Ok(())
    }
}

/// Uniform positive composition of `total` into `parts`.
pub fn sample_composition<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Result<Vec<usize>> {
    if parts == 0 || parts > total {
        return Err(Error::BadComposition { total, parts });
    }
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(core::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    Ok(out)
}

/// Start offsets of each clip of one thread.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThreadPlan {
    pub offsets: Vec<usize>,
}

impl ThreadPlan {
    pub fn start(&self) -> usize {
        self.offsets[0]
    }

    /// One past the last timestep of the last clip.
    pub fn end(&self, clip_len: usize) -> usize {
        self.offsets[self.offsets.len() - 1] + clip_len
    }
}

/// Places threads of sizes `m` in a stream of `stream_len` timesteps.
///
/// Within a thread, consecutive clips are separated by gaps drawn from
/// `gap_min..=gap_max`. Threads occupy disjoint spans in a random order with
/// at least `separation` timesteps between spans; the leftover slack is
/// spread uniformly over the `n + 1` open intervals. Returns plans in the
/// order of `m`.
pub fn plan_threads<R: Rng + ?Sized>(
    stream_len: usize,
    m: &[usize],
    cfg: &SynthStoryConfig,
    rng: &mut R,
) -> Result<Vec<ThreadPlan>> {
    if m.is_empty() || m.contains(&0) {
        return Err(Error::BadComposition {
            total: m.iter().sum(),
            parts: m.len(),
        });
    }
    if stream_len < cfg.min_stream_len {
        return Err(Error::StreamTooShort {
            needed: cfg.min_stream_len,
            available: stream_len,
        });
    }
    let n = m.len();
    let mut rel: Vec<Vec<usize>> = Vec::with_capacity(n);
    for &mi in m {
        let mut offs = Vec::with_capacity(mi);
        let mut at = 0;
        for j in 0..mi {
            if j > 0 {
                at += cfg.clip_len + rng.random_range(cfg.gap_min..=cfg.gap_max);
            }
            offs.push(at);
        }
        rel.push(offs);
    }
    let spans: Vec<usize> = rel.iter().map(|o| o[o.len() - 1] + cfg.clip_len).collect();
    let needed = spans.iter().sum::<usize>() + (n - 1) * cfg.separation;
    if needed > stream_len {
        return Err(Error::StreamTooShort {
            needed,
            available: stream_len,
        });
    }
    let slack = stream_len - needed;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // Stars and bars: n bars among slack + n slots split slack into n + 1 parts.
    let mut bars: Vec<usize> = sample(rng, slack + n, n).into_vec();
    bars.sort_unstable();
    let mut plans = vec![ThreadPlan { offsets: Vec::new() }; n];
    let mut cursor = 0;
    let mut prev_bar: Option<usize> = None;
    for (k, &thread) in order.iter().enumerate() {
        let free = match prev_bar {
            None => bars[k],
            Some(p) => bars[k] - p - 1,
        };
        prev_bar = Some(bars[k]);
        if k > 0 {
            cursor += cfg.separation;
        }
        cursor += free;
        plans[thread] = ThreadPlan {
            offsets: rel[thread].iter().map(|o| cursor + o).collect(),
        };
        cursor += spans[thread];
    }
    Ok(plans)
}

/// A random arrangement of the template `q = (1,…,1, 2,…,2, …)` with `m_i`
/// copies of `i`, uniform over its distinct permutations.
pub fn weave_template<R: Rng + ?Sized>(m: &[usize], rng: &mut R) -> Vec<usize> {
    let mut q: Vec<usize> = m
        .iter()
        .enumerate()
        .flat_map(|(i, &mi)| core::iter::repeat_n(i + 1, mi))
        .collect();
    q.shuffle(rng);
    q
}

/// One clip waiting to be woven into a story.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceClip {
    pub feature: ClipFeature,
    pub offset: usize,
    pub latent: Option<usize>,
}

/// Interleaves `threads` following the 1-based arrangement `q_tilde`: story
/// clip `j` is the next unused clip of thread `q_tilde[j]`.
pub fn weave_with(id: String, threads: Vec<Vec<SourceClip>>, q_tilde: &[usize], stream_id: u64) -> Result<Story> {
    let mut counts = vec![0usize; threads.len()];
    for &q in q_tilde {
        if q == 0 || q > threads.len() {
            return Err(Error::IndexOutOfRange {
                index: q,
                len: threads.len(),
            });
        }
        counts[q - 1] += 1;
    }
    for (c, t) in counts.iter().zip(&threads) {
        if *c != t.len() {
            return Err(Error::BadComposition {
                total: q_tilde.len(),
                parts: threads.len(),
            });
        }
    }
    let mut iters: Vec<_> = threads.into_iter().map(Vec::into_iter).collect();
    let mut clips = Vec::with_capacity(q_tilde.len());
    let mut offsets = Vec::with_capacity(q_tilde.len());
    let mut latents = Vec::with_capacity(q_tilde.len());
    for &q in q_tilde {
        let c = iters[q - 1].next().expect("counts checked above");
        clips.push(c.feature);
        offsets.push(c.offset);
        latents.push(c.latent);
    }
    let latent_ids = latents.iter().copied().collect::<Option<Vec<usize>>>();
    Ok(Story {
        id,
        clips,
        ground_truth: Some(canonicalize(q_tilde)?),
        provenance: Provenance {
            stream_id,
            start_offset: offsets.iter().copied().min().unwrap_or(0),
            source_offsets: offsets,
            latent_ids,
        },
    })
}

/// Interleaves `threads` with a uniformly random order-preserving template.
pub fn weave<R: Rng + ?Sized>(id: String, threads: Vec<Vec<SourceClip>>, stream_id: u64, rng: &mut R) -> Result<Story> {
    if threads.is_empty() || threads.iter().any(Vec::is_empty) {
        return Err(Error::Empty("thread"));
    }
    let m: Vec<usize> = threads.iter().map(Vec::len).collect();
    let q = weave_template(&m, rng);
    weave_with(id, threads, &q, stream_id)
}

/// Samples one synthetic story from `stream`: thread count, composition,
/// placement, clip extraction and weaving.
pub fn sample_synthetic_story<R: Rng + ?Sized>(
    stream: &FeatureStream,
    stream_id: u64,
    id: String,
    cfg: &SynthStoryConfig,
    rng: &mut R,
) -> Result<Story> {
    cfg.validate()?;
    let n = rng.random_range(1..=cfg.max_threads);
    let m = sample_composition(cfg.clips, n, rng)?;
    let plans = plan_threads(stream.len(), &m, cfg, rng)?;
    let threads = plans
        .iter()
        .map(|p| {
            p.offsets
                .iter()
                .map(|&o| SourceClip {
                    feature: stream.clip_feature(o, cfg.clip_len),
                    offset: o,
                    latent: Some(stream.clip_latent(o, cfg.clip_len)),
                })
                .collect()
        })
        .collect();
    weave(id, threads, stream_id, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaturalStoryConfig {
    pub clip_len: usize,
    pub min_clips: usize,
    pub max_clips: usize,
}

impl NaturalStoryConfig {
    pub fn desk() -> Self {
        Self {
            clip_len: 32,
            min_clips: 6,
            max_clips: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.min_clips == 0 || self.min_clips > self.max_clips {
            return Err(Error::InvalidConfig("need clip_len ≥ 1 and 1 ≤ min_clips ≤ max_clips".into()));
        }
        Ok(())
    }
}

/// Slices `clips` consecutive clips of `clip_len` timesteps starting at
/// `start`. Each clip's thread is its majority latent activity; a recurring
/// activity maps back to the same thread.
pub fn natural_story(
    stream: &FeatureStream,
    stream_id: u64,
    id: String,
    start: usize,
    clips: usize,
    clip_len: usize,
) -> Result<Story> {
    let needed = start + clips * clip_len;
    if clips == 0 {
        return Err(Error::EmptyStory);
    }
    if needed > stream.len() {
        return Err(Error::StreamTooShort {
            needed,
            available: stream.len(),
        });
    }
    let offsets: Vec<usize> = (0..clips).map(|k| start + k * clip_len).collect();
    let latents: Vec<usize> = offsets.iter().map(|&o| stream.clip_latent(o, clip_len)).collect();
    Ok(Story {
        id,
        clips: offsets.iter().map(|&o| stream.clip_feature(o, clip_len)).collect(),
        ground_truth: Some(canonicalize(&latents)?),
        provenance: Provenance {
            stream_id,
            start_offset: start,
            source_offsets: offsets,
            latent_ids: Some(latents),
        },
    })
}

/// `count` natural stories at random windows with random lengths.
pub fn sample_natural_stories<R: Rng + ?Sized>(
    stream: &FeatureStream,
    stream_id: u64,
    prefix: &str,
    count: usize,
    cfg: &NaturalStoryConfig,
    rng: &mut R,
) -> Result<Vec<Story>> {
    cfg.validate()?;
    let longest = cfg.max_clips * cfg.clip_len;
    if longest > stream.len() {
        return Err(Error::StreamTooShort {
            needed: longest,
            available: stream.len(),
        });
    }
    (0..count)
        .map(|i| {
            let clips = rng.random_range(cfg.min_clips..=cfg.max_clips);
            let start = rng.random_range(0..=stream.len() - clips * cfg.clip_len);
            natural_story(stream, stream_id, format!("{prefix}{i}"), start, clips, cfg.clip_len)
        })
        .collect()
}

/// Draws natural stories until each thread count `1..=max_threads` has
/// `per_bucket` of them (bounded by `max_draws`), so that multi-thread
/// stories are not swamped by single-activity windows.
#[allow(clippy::too_many_arguments)]
pub fn sample_balanced_natural_stories<R: Rng + ?Sized>(
    stream: &FeatureStream,
    stream_id: u64,
    prefix: &str,
    per_bucket: usize,
    max_threads: usize,
    cfg: &NaturalStoryConfig,
    max_draws: usize,
    rng: &mut R,
) -> Result<Vec<Story>> {
    let mut buckets: Vec<Vec<Story>> = vec![Vec::new(); max_threads];
    let mut draws = 0;
    while buckets.iter().any(|b| b.len() < per_bucket) && draws < max_draws {
        let s = sample_natural_stories(stream, stream_id, "", 1, cfg, rng)?.remove(0);
        draws += 1;
        let n = s.ground_truth.as_ref().map_or(0, ThreadAssignment::num_threads);
        if (1..=max_threads).contains(&n) && buckets[n - 1].len() < per_bucket {
            buckets[n - 1].push(s);
        }
    }
    let mut out: Vec<Story> = buckets.into_iter().flatten().collect();
    for (i, s) in out.iter_mut().enumerate() {
        s.id = format!("{prefix}{i}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn src(v: f64, offset: usize) -> SourceClip {
        SourceClip {
            feature: ClipFeature::new(vec![v]).unwrap(),
            offset,
            latent: None,
        }
    }

    #[test]
    fn worked_weave_example() {
        // thread i clip j is tagged 10·i + j
        let m = [3, 5, 4];
        let threads: Vec<Vec<SourceClip>> = m
            .iter()
            .enumerate()
            .map(|(i, &mi)| (1..=mi).map(|j| src((10 * (i + 1) + j) as f64, 100 * i + j)).collect())
            .collect();
        let q = [1, 2, 1, 2, 2, 3, 3, 2, 2, 3, 3, 1];
        let s = weave_with("w".into(), threads, &q, 0).unwrap();
        let got: Vec<f64> = s.clips.iter().map(|c| c.values()[0]).collect();
        assert_eq!(got, vec![11., 21., 12., 22., 23., 31., 32., 24., 25., 33., 34., 13.]);
        assert_eq!(s.ground_truth.unwrap().labels(), &q);
    }

    #[test]
    fn single_thread_weave_is_identity() {
        let threads = vec![vec![src(1.0, 0), src(2.0, 5), src(3.0, 9)]];
        let s = weave("x".into(), threads, 0, &mut rng()).unwrap();
        assert_eq!(s.ground_truth.unwrap().labels(), &[1, 1, 1]);
        assert_eq!(s.provenance.source_offsets, vec![0, 5, 9]);
    }

    #[test]
    fn composition_edge_cases() {
        assert_eq!(sample_composition(5, 1, &mut rng()).unwrap(), vec![5]);
        assert_eq!(sample_composition(4, 4, &mut rng()).unwrap(), vec![1, 1, 1, 1]);
        assert!(sample_composition(3, 4, &mut rng()).is_err());
    }

    #[test]
    fn plan_rejects_short_stream() {
        let cfg = SynthStoryConfig::desk();
        assert!(matches!(
            plan_threads(500, &[5], &cfg, &mut rng()),
            Err(Error::StreamTooShort { .. })
        ));
        assert!(plan_threads(900, &[3, 3], &cfg, &mut rng()).is_ok());
        // five threads need four separations: 960 > 900
        assert!(matches!(
            plan_threads(900, &[2, 2, 2, 2, 2], &cfg, &mut rng()),
            Err(Error::StreamTooShort { .. })
        ));
    }

    #[test]
    fn noiseless_segment_is_constant() {
        let cfg = WorldConfig {
            noise: 0.0,
            drift: 0.0,
            scene_rank: 0,
            stream_len: 2000,
            ..WorldConfig::desk()
        };
        let s = generate_stream(&cfg, &mut rng()).unwrap();
        assert_eq!(s.len(), 2000);
        assert_eq!(s.latent().len(), 2000);
        let seg = s.segments()[0];
        for t in seg.start + 1..seg.start + seg.len {
            assert_eq!(s.feature(t), s.feature(seg.start));
        }
        assert!(s.segments().iter().take(s.segments().len() - 1).all(|g| g.len >= cfg.min_dwell));
    }

    #[test]
    fn clip_latent_tie_goes_to_earlier() {
        let s = FeatureStream::from_parts(1, vec![1.0; 4], vec![7, 7, 3, 3]).unwrap();
        assert_eq!(s.clip_latent(0, 4), 7);
        let s = FeatureStream::from_parts(1, vec![1.0; 5], vec![7, 3, 3, 7, 3]).unwrap();
        assert_eq!(s.clip_latent(0, 5), 3);
    }

    #[test]
    fn natural_story_resume_pattern() {
        let latent = [vec![4; 8], vec![9; 8], vec![4; 8]].concat();
        let s = FeatureStream::from_parts(1, vec![1.0; 24], latent).unwrap();
        let story = natural_story(&s, 0, "n".into(), 0, 6, 4).unwrap();
        assert_eq!(story.ground_truth.unwrap().labels(), &[1, 1, 2, 2, 1, 1]);
        let one = natural_story(&s, 0, "n".into(), 8, 2, 4).unwrap();
        assert_eq!(one.ground_truth.unwrap().labels(), &[1, 1]);
    }
}
