//! Rand index, thread-count error, teacher-forcing accuracy and the closed
//! forms for the naive baselines.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::controller::Model;
use crate::error::{Error, Result};
use crate::loss::teacher_forced_rollout;
use crate::story::{scenario_of, Scenario, Story, ThreadAssignment};

/// Pair counts of a predicted partition against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

pub fn pair_counts(truth: &ThreadAssignment, pred: &ThreadAssignment) -> Result<PairCounts> {
    if truth.len() != pred.len() {
        return Err(Error::GroundTruthLength {
            labels: truth.len(),
            clips: pred.len(),
        });
    }
    let (a, b) = (truth.num_threads(), pred.num_threads());
    let mut table = vec![0u64; a * b];
    for (&g, &p) in truth.labels().iter().zip(pred.labels()) {
        table[(g - 1) * b + (p - 1)] += 1;
    }
    let tp: u64 = table.iter().map(|&n| choose2(n)).sum();
    let same_truth: u64 = truth.thread_sizes().iter().map(|&n| choose2(n as u64)).sum();
    let same_pred: u64 = pred.thread_sizes().iter().map(|&n| choose2(n as u64)).sum();
    let fn_ = same_truth - tp;
    let fp = same_pred - tp;
    let tn = choose2(truth.len() as u64) - tp - fp - fn_;
    Ok(PairCounts { tp, fp, tn, fn_ })
}

/// Fraction of clip pairs on which the two partitions agree.
pub fn rand_index(truth: &ThreadAssignment, pred: &ThreadAssignment) -> Result<f64> {
    if truth.len() < 2 {
        return Err(Error::TooFewClips);
    }
    let c = pair_counts(truth, pred)?;
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Largest `T` for which Bell and Stirling numbers are computed.
pub const MAX_EXACT_T: usize = 30;

fn check_range(t: usize) -> Result<()> {
    if t > MAX_EXACT_T {
        return Err(Error::OutOfSupportedRange {
            value: t,
            max: MAX_EXACT_T,
        });
    }
    Ok(())
}

/// Bell number `B(t)` via the Bell triangle.
pub fn bell(t: usize) -> Result<u128> {
    check_range(t)?;
    if t == 0 {
        return Ok(1);
    }
    let mut row = vec![1u128];
    for _ in 1..t {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().expect("rows are non-empty"));
        for v in &row {
            let x = *next.last().expect("just pushed") + v;
            next.push(x);
        }
        row = next;
    }
    Ok(*row.last().expect("rows are non-empty"))
}

/// Stirling number of the second kind `S(t, n)`.
pub fn stirling2(t: usize, n: usize) -> Result<u128> {
    check_range(t)?;
    if n > t {
        return Err(Error::OutOfSupportedRange { value: n, max: t });
    }
    // row[k] = S(i, k)
    let mut row = vec![0u128; t + 1];
    row[0] = 1;
    for i in 1..=t {
        for k in (1..=i).rev() {
            row[k] = k as u128 * row[k] + row[k - 1];
        }
        row[0] = 0;
    }
    Ok(row[n])
}

/// `Σ_i C(|V_i|, 2) / C(T, 2)`: the share of truly same-thread pairs.
fn same_thread_share(truth: &ThreadAssignment) -> Result<f64> {
    let t = truth.len() as u64;
    if t < 2 {
        return Err(Error::TooFewClips);
    }
    let same: u64 = truth.thread_sizes().iter().map(|&n| choose2(n as u64)).sum();
    Ok(same as f64 / choose2(t) as f64)
}

/// RI of putting every clip in one thread.
pub fn expected_ri_single_thread(truth: &ThreadAssignment) -> Result<f64> {
    same_thread_share(truth)
}

/// Expected RI of a uniformly random partition of the clips.
///
/// Two given clips share a block of a uniform random partition with
/// probability `B(T−1)/B(T)`.
pub fn expected_ri_chance(truth: &ThreadAssignment) -> Result<f64> {
    let t = truth.len();
    let share = same_thread_share(truth)?;
    let q = bell(t - 1)? as f64 / bell(t)? as f64;
    Ok(q * share + (1.0 - q) * (1.0 - share))
}

/// Expected block count of a uniformly random partition of `t` clips.
pub fn expected_threads_chance(t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::EmptyStory);
    }
    let mut num = 0u128;
    let mut den = 0u128;
    for n in 1..=t {
        let s = stirling2(t, n)?;
        num += s * n as u128;
        den += s;
    }
    Ok(num as f64 / den as f64)
}

/// Expected `ΔN` of a random partition against `truth`.
pub fn expected_dn_chance(truth: &ThreadAssignment) -> Result<f64> {
    Ok(expected_threads_chance(truth.len())? - truth.num_threads() as f64)
}

/// Predicted minus true thread count.
pub fn delta_n(truth: &ThreadAssignment, pred: &ThreadAssignment) -> i64 {
    pred.num_threads() as i64 - truth.num_threads() as i64
}

/// Anything that can be scored decision by decision under forced history.
pub trait ForcedPredictor {
    /// For each `t = 2..=T`, the probability that the decision at `t` is
    /// correct given the ground-truth history `y_1..y_{t−1}`.
    fn step_scores(&self, story: &Story) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub sum: f64,
    pub count: usize,
}

impl Tally {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Teacher-forcing accuracy, grouped three ways.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TfaReport {
    /// By the number of threads seen up to and including the scored clip.
    pub by_prefix_threads: BTreeMap<usize, Tally>,
    /// By the thread count of the whole story.
    pub by_story_threads: BTreeMap<usize, Tally>,
    /// By the number of clips observed (the scored clip's 1-based position).
    pub by_clips_observed: BTreeMap<usize, Tally>,
    /// By the true decision's scenario, indexed by [`Scenario::index`].
    pub by_scenario: [Tally; 3],
    pub overall: Tally,
}

impl TfaReport {
    pub fn scenario(&self, s: Scenario) -> &Tally {
        &self.by_scenario[s.index()]
    }
}

/// Scores every decision from the second clip on; single-clip prefixes
/// count in neither numerator nor denominator.
pub fn tfa<P: ForcedPredictor + ?Sized>(predictor: &P, stories: &[Story]) -> Result<TfaReport> {
    let mut rep = TfaReport::default();
    for s in stories {
        let y = s.ground_truth()?;
        let scores = predictor.step_scores(s)?;
        if scores.len() + 1 != y.len() {
            return Err(Error::GroundTruthLength {
                labels: y.len(),
                clips: scores.len() + 1,
            });
        }
        let total = y.num_threads();
        for (k, &p) in scores.iter().enumerate() {
            let t = k + 2;
            rep.by_prefix_threads.entry(y.threads_in_prefix(t)).or_default().add(p);
            rep.by_story_threads.entry(total).or_default().add(p);
            rep.by_clips_observed.entry(t).or_default().add(p);
            rep.by_scenario[scenario_of(y, t)?.index()].add(p);
            rep.overall.add(p);
        }
    }
    Ok(rep)
}

/// Evaluation of one story by one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryResult {
    pub id: String,
    pub clips: usize,
    pub true_threads: usize,
    /// Predicted (or expected) thread count.
    pub pred_threads: f64,
    /// `None` for single-clip stories.
    pub ri: Option<f64>,
    pub delta_n: f64,
}

impl StoryResult {
    pub fn from_prediction(story: &Story, pred: &ThreadAssignment) -> Result<Self> {
        let y = story.ground_truth()?;
        let ri = if y.len() >= 2 { Some(rand_index(y, pred)?) } else { None };
        Ok(Self {
            id: story.id.clone(),
            clips: y.len(),
            true_threads: y.num_threads(),
            pred_threads: pred.num_threads() as f64,
            ri,
            delta_n: delta_n(y, pred) as f64,
        })
    }

    /// Analytic expectations for a uniformly random partition.
    pub fn chance(story: &Story) -> Result<Self> {
        let y = story.ground_truth()?;
        let ri = if y.len() >= 2 { Some(expected_ri_chance(y)?) } else { None };
        let expected = expected_threads_chance(y.len())?;
        Ok(Self {
            id: story.id.clone(),
            clips: y.len(),
            true_threads: y.num_threads(),
            pred_threads: expected,
            ri,
            delta_n: expected - y.num_threads() as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub stories: usize,
    pub mean_ri: Option<f64>,
    pub mean_delta_n: f64,
}

fn bucket_stats<'a>(results: impl Iterator<Item = &'a StoryResult>) -> BucketStats {
    let mut ri = Tally::default();
    let mut dn = Tally::default();
    for r in results {
        if let Some(v) = r.ri {
            ri.add(v);
        }
        dn.add(r.delta_n);
    }
    BucketStats {
        stories: dn.count,
        mean_ri: ri.mean(),
        mean_delta_n: dn.mean().unwrap_or(0.0),
    }
}

/// Per-story results with averages by true thread count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub stories: Vec<StoryResult>,
    pub by_threads: BTreeMap<usize, BucketStats>,
    /// Every story weighted equally.
    pub overall: BucketStats,
    /// Mean of the bucket means.
    pub bucket_mean_ri: Option<f64>,
    pub tfa: Option<TfaReport>,
}

impl MetricsReport {
    pub fn new(method: String, stories: Vec<StoryResult>, tfa: Option<TfaReport>) -> Result<Self> {
        if stories.is_empty() {
            return Err(Error::Empty("results"));
        }
        let mut keys: Vec<usize> = stories.iter().map(|r| r.true_threads).collect();
        keys.sort_unstable();
        keys.dedup();
        let by_threads: BTreeMap<usize, BucketStats> = keys
            .into_iter()
            .map(|k| (k, bucket_stats(stories.iter().filter(|r| r.true_threads == k))))
            .collect();
        let overall = bucket_stats(stories.iter());
        let means: Vec<f64> = by_threads.values().filter_map(|b| b.mean_ri).collect();
        let bucket_mean_ri = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
        Ok(Self {
            method,
            stories,
            by_threads,
            overall,
            bucket_mean_ri,
            tfa,
        })
    }

    /// Mean RI over stories with at least two clips.
    pub fn mean_ri(&self) -> Option<f64> {
        self.overall.mean_ri
    }
}

/// Mean RI of `predict` over `stories` with at least two clips.
pub fn mean_rand_index<F>(stories: &[Story], mut predict: F) -> Result<f64>
where
    F: FnMut(&Story) -> Result<ThreadAssignment>,
{
    let mut acc = Tally::default();
    for s in stories {
        let y = s.ground_truth()?;
        if y.len() < 2 {
            continue;
        }
        acc.add(rand_index(y, &predict(s)?)?);
    }
    acc.mean().ok_or(Error::TooFewClips)
}

/// The model scored by its argmax under teacher forcing.
impl ForcedPredictor for Model {
    fn step_scores(&self, story: &Story) -> Result<Vec<f64>> {
        let y = story.ground_truth()?;
        let dists = teacher_forced_rollout(self, story)?;
        Ok((2..=y.len())
            .map(|t| if dists[t - 1].chosen == y.label(t) { 1.0 } else { 0.0 })
            .collect())
    }
}
