//! Reference methods: one thread, random partitions, online clustering and
//! a boundary detector that never resumes a thread.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mean_rand_index, ForcedPredictor};
use crate::story::{scenario_of, ClipFeature, Scenario, Story, ThreadAssignment};
use crate::tensor::cosine;

/// Every clip in thread 1.
pub fn predict_single_thread(story: &Story) -> Result<ThreadAssignment> {
    ThreadAssignment::single_thread(story.len())
}

/// Forced scores of the single-thread baseline: it cannot open a thread, and
/// otherwise picks uniformly among the existing ones.
pub struct SingleThread;

impl ForcedPredictor for SingleThread {
    fn step_scores(&self, story: &Story) -> Result<Vec<f64>> {
        let y = story.ground_truth()?;
        (2..=y.len())
            .map(|t| {
                let n = y.threads_in_prefix(t - 1);
                Ok(if y.label(t) > n { 0.0 } else { 1.0 / n as f64 })
            })
            .collect()
    }
}

/// Forced scores of a uniform choice among the existing threads and a new one.
pub struct Chance;

impl ForcedPredictor for Chance {
    fn step_scores(&self, story: &Story) -> Result<Vec<f64>> {
        let y = story.ground_truth()?;
        Ok((2..=y.len())
            .map(|t| 1.0 / (y.threads_in_prefix(t - 1) + 1) as f64)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub threshold: f64,
}

/// Mean cosine of `clip` to the members of each cluster, then the 1-based
/// choice: best cluster if above threshold (ties to the lowest index), else
/// `clusters.len() + 1`.
fn cluster_choice(clip: &ClipFeature, clusters: &[Vec<&ClipFeature>], threshold: f64) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, members) in clusters.iter().enumerate() {
        let s = members.iter().map(|m| cosine(clip.values(), m.values())).sum::<f64>() / members.len() as f64;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    match best {
        Some((i, s)) if s > threshold => i + 1,
        _ => clusters.len() + 1,
    }
}

/// Greedy online clustering by mean cosine similarity.
pub fn online_cluster(clips: &[ClipFeature], cfg: &ClusteringConfig) -> Result<ThreadAssignment> {
    if clips.is_empty() {
        return Err(Error::EmptyStory);
    }
    let mut clusters: Vec<Vec<&ClipFeature>> = Vec::new();
    let mut labels = Vec::with_capacity(clips.len());
    for clip in clips {
        let k = cluster_choice(clip, &clusters, cfg.threshold);
        if k > clusters.len() {
            clusters.push(vec![clip]);
        } else {
            clusters[k - 1].push(clip);
        }
        labels.push(k);
    }
    ThreadAssignment::from_canonical(labels)
}

/// Clustering scored with its clusters populated from the ground truth.
impl ForcedPredictor for ClusteringConfig {
    fn step_scores(&self, story: &Story) -> Result<Vec<f64>> {
        let y = story.ground_truth()?;
        let mut clusters: Vec<Vec<&ClipFeature>> = Vec::new();
        let mut out = Vec::with_capacity(y.len().saturating_sub(1));
        for (t, clip) in story.clips.iter().enumerate() {
            let label = y.labels()[t];
            if t > 0 {
                let hit = cluster_choice(clip, &clusters, self.threshold) == label;
                out.push(if hit { 1.0 } else { 0.0 });
            }
            if label > clusters.len() {
                clusters.push(vec![clip]);
            } else {
                clusters[label - 1].push(clip);
            }
        }
        Ok(out)
    }
}

/// Threshold grid `-1, -0.995, …, 1`.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=400).map(|k| (k as f64 - 200.0) / 200.0)
}

/// The grid threshold with the best mean validation RI (smallest on ties).
pub fn fit_threshold(val: &[Story]) -> Result<ClusteringConfig> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut best: Option<(f64, f64)> = None;
    for th in threshold_grid() {
        let cfg = ClusteringConfig { threshold: th };
        let ri = mean_rand_index(val, |s| online_cluster(&s.clips, &cfg))?;
        if best.is_none_or(|(_, b)| ri > b) {
            best = Some((th, ri));
        }
    }
    Ok(ClusteringConfig {
        threshold: best.expect("grid is non-empty").0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictabilityConfig {
    /// Width of the Laplacian-of-Gaussian, in clips.
    pub sigma: f64,
    /// Kernel half-width, in clips.
    pub half_width: usize,
    /// Only every `stride`-th edge may become a boundary.
    pub stride: usize,
    pub threshold: f64,
}

impl Default for PredictabilityConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            half_width: 3,
            stride: 1,
            threshold: 0.0,
        }
    }
}

impl PredictabilityConfig {
    /// Negated, zero-mean LoG taps for offsets `-w..=w`: a peak in the input
    /// gives a positive response.
    pub fn kernel(&self) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let w = self.half_width as i64;
        let mut k: Vec<f64> = (-w..=w)
            .map(|x| {
                let x2 = (x * x) as f64;
                -(x2 / (s2 * s2) - 1.0 / s2) * libm::exp(-x2 / (2.0 * s2))
            })
            .collect();
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        k.iter_mut().for_each(|v| *v -= mean);
        k
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.half_width == 0 || self.stride == 0 || !self.threshold.is_finite() {
            return Err(Error::InvalidConfig(
                "sigma, half_width and stride must be positive, threshold finite".into(),
            ));
        }
        Ok(())
    }
}

/// Smoothed change score for each edge `k` between clips `k` and `k + 1`
/// (0-based), with replicate padding.
pub fn boundary_scores(clips: &[ClipFeature], cfg: &PredictabilityConfig) -> Vec<f64> {
    if clips.len() < 2 {
        return Vec::new();
    }
    let d: Vec<f64> = clips
        .windows(2)
        .map(|w| 1.0 - cosine(w[0].values(), w[1].values()))
        .collect();
    let kernel = cfg.kernel();
    let w = cfg.half_width as i64;
    let last = d.len() as i64 - 1;
    (0..d.len() as i64)
        .map(|k| {
            (-w..=w)
                .zip(&kernel)
                .map(|(off, tap)| tap * d[(k + off).clamp(0, last) as usize])
                .sum()
        })
        .collect()
}

/// Edges (0-based) that are local maxima of the score above the threshold.
pub fn boundaries(scores: &[f64], cfg: &PredictabilityConfig) -> Vec<usize> {
    (0..scores.len())
        .filter(|&k| k % cfg.stride == 0)
        .filter(|&k| {
            let s = scores[k];
            let left = k == 0 || s > scores[k - 1];
            let right = k + 1 == scores.len() || s >= scores[k + 1];
            left && right && s > cfg.threshold
        })
        .collect()
}

/// Splits the story at detected boundaries; threads are never resumed.
pub fn predictability(clips: &[ClipFeature], cfg: &PredictabilityConfig) -> Result<ThreadAssignment> {
    if clips.is_empty() {
        return Err(Error::EmptyStory);
    }
    let cuts = boundaries(&boundary_scores(clips, cfg), cfg);
    let mut labels = Vec::with_capacity(clips.len());
    let mut label = 1;
    labels.push(1);
    for k in 0..clips.len() - 1 {
        if cuts.contains(&k) {
            label += 1;
        }
        labels.push(label);
    }
    ThreadAssignment::from_canonical(labels)
}

/// Correct on Continue when no boundary precedes the clip, on New when one
/// does; never correct on Resume.
impl ForcedPredictor for PredictabilityConfig {
    fn step_scores(&self, story: &Story) -> Result<Vec<f64>> {
        let y = story.ground_truth()?;
        let cuts = boundaries(&boundary_scores(&story.clips, self), self);
        (2..=y.len())
            .map(|t| {
                let cut = cuts.contains(&(t - 2));
                let hit = match scenario_of(y, t)? {
                    Scenario::Continue => !cut,
                    Scenario::New => cut,
                    Scenario::Resume => false,
                };
                Ok(if hit { 1.0 } else { 0.0 })
            })
            .collect()
    }
}

/// Fits the boundary threshold on validation stories for best mean RI.
///
/// Candidates are every local-maximum score seen in validation (cut all
/// strictly above it) plus "no cuts"; ties go to the smallest threshold.
pub fn fit_predictability(val: &[Story], base: &PredictabilityConfig) -> Result<PredictabilityConfig> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    base.validate()?;
    let open = PredictabilityConfig {
        threshold: f64::NEG_INFINITY,
        ..*base
    };
    let mut candidates: Vec<f64> = val
        .iter()
        .flat_map(|s| {
            let sc = boundary_scores(&s.clips, &open);
            boundaries(&sc, &open).into_iter().map(move |k| sc[k])
        })
        .collect();
    let lowest = candidates.iter().copied().fold(f64::INFINITY, f64::min);
    candidates.push(if lowest.is_finite() { lowest - 1.0 } else { 0.0 });
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None;
    for th in candidates {
        let cfg = PredictabilityConfig { threshold: th, ..*base };
        let ri = mean_rand_index(val, |s| predictability(&s.clips, &cfg))?;
        if best.is_none_or(|(_, b)| ri > b) {
            best = Some((th, ri));
        }
    }
    Ok(PredictabilityConfig {
        threshold: best.expect("at least one candidate").0,
        ..*base
    })
}
