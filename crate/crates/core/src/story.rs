//! Clips, stories and thread assignments.
//!
//! Thread indices are 1-based throughout the data model: the first clip of
//! every story belongs to thread 1 and threads are numbered by first
//! appearance. Serialized forms shift to 0-based at the IO boundary.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature vector of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeature(Vec<f64>);

impl ClipFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

/// Canonical clip-to-thread labels `y_1..y_T` (1-based, first-appearance order).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ThreadAssignment(Vec<usize>);

impl ThreadAssignment {
    /// Accepts labels that are already canonical.
    pub fn from_canonical(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyStory);
        }
        let mut max = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 || l > max + 1 {
                return Err(Error::NotCanonical { position: i });
            }
            max = max.max(l);
        }
        Ok(Self(labels))
    }

    /// Accepts canonical 0-based labels (the serialized form).
    pub fn from_zero_based(labels: &[usize]) -> Result<Self> {
        Self::from_canonical(labels.iter().map(|l| l + 1).collect())
    }

    pub fn to_zero_based(&self) -> Vec<usize> {
        self.0.iter().map(|l| l - 1).collect()
    }

    /// All clips in one thread.
    pub fn single_thread(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyStory);
        }
        Ok(Self(vec![1; len]))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `y_t` for 1-based `t`.
    pub fn label(&self, t: usize) -> usize {
        self.0[t - 1]
    }

    pub fn num_threads(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// Number of threads observed in `y_{1:t}`.
    pub fn threads_in_prefix(&self, t: usize) -> usize {
        self.0[..t].iter().copied().max().unwrap_or(0)
    }

    /// Prefix `y_{1:t}`.
    pub fn prefix(&self, t: usize) -> Self {
        Self(self.0[..t].to_vec())
    }

    /// Clip positions (1-based) of each thread, in thread order.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.num_threads()];
        for (i, &l) in self.0.iter().enumerate() {
            blocks[l - 1].push(i + 1);
        }
        blocks
    }

    /// Block sizes `|V^i|`.
    pub fn thread_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_threads()];
        for &l in &self.0 {
            sizes[l - 1] += 1;
        }
        sizes
    }
}

/// Relabels any labelling into first-appearance order, preserving the partition.
pub fn canonicalize<L: PartialEq + Copy>(labels: &[L]) -> Result<ThreadAssignment> {
    if labels.is_empty() {
        return Err(Error::EmptyStory);
    }
    let mut seen: Vec<L> = Vec::new();
    let out = labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i + 1,
            None => {
                seen.push(*l);
                seen.len()
            }
        })
        .collect();
    Ok(ThreadAssignment(out))
}

/// Clip-index sets of each thread (1-based positions).
pub fn partition_of(y: &ThreadAssignment) -> Vec<Vec<usize>> {
    y.partition()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    Continue,
    New,
    Resume,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Continue, Scenario::New, Scenario::Resume];

    pub fn index(self) -> usize {
        match self {
            Scenario::Continue => 0,
            Scenario::New => 1,
            Scenario::Resume => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Scenario::Continue => "C",
            Scenario::New => "N",
            Scenario::Resume => "R",
        }
    }
}

/// Scenario of the decision at 1-based step `t ≥ 2`.
///
/// Any return to an existing thread other than the previous clip's counts as
/// a resume, including after a single intervening clip.
pub fn scenario_of(y: &ThreadAssignment, t: usize) -> Result<Scenario> {
    if t == 1 {
        return Err(Error::FirstClipScenario);
    }
    if t == 0 || t > y.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: y.len(),
        });
    }
    let seen = y.threads_in_prefix(t - 1);
    let cur = y.label(t);
    Ok(if cur > seen {
        Scenario::New
    } else if cur == y.label(t - 1) {
        Scenario::Continue
    } else {
        Scenario::Resume
    })
}

/// Where a story's clips came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stream_id: u64,
    pub start_offset: usize,
    /// Source timestep at which each clip starts, in story order.
    pub source_offsets: Vec<usize>,
    /// Majority latent activity of each clip, when known.
    pub latent_ids: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Story {
    pub id: String,
    pub clips: Vec<ClipFeature>,
    pub ground_truth: Option<ThreadAssignment>,
    pub provenance: Provenance,
}

impl Story {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn ground_truth(&self) -> Result<&ThreadAssignment> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(self.id.clone()))
    }

    /// Checks the structural invariants, and the clip dimension if given.
    ///
    /// Source offsets must increase along every ground-truth thread (or along
    /// the whole story when there is no ground truth).
    pub fn validate(&self, clip_dim: Option<usize>) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::EmptyStory);
        }
        if let Some(d) = clip_dim {
            for c in &self.clips {
                c.check_dim(d)?;
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.clips.len() {
                return Err(Error::GroundTruthLength {
                    labels: gt.len(),
                    clips: self.clips.len(),
                });
            }
        }
        let offsets = &self.provenance.source_offsets;
        if !offsets.is_empty() {
            if offsets.len() != self.clips.len() {
                return Err(Error::OffsetsNotIncreasing);
            }
            let blocks = match &self.ground_truth {
                Some(gt) => gt.partition(),
                None => vec![(1..=self.clips.len()).collect()],
            };
            for block in blocks {
                if block.windows(2).any(|w| offsets[w[0] - 1] >= offsets[w[1] - 1]) {
                    return Err(Error::OffsetsNotIncreasing);
                }
            }
        }
        Ok(())
    }
}
