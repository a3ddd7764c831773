#![allow(dead_code)]

use rand::Rng;
use unweave_core::{ClipFeature, Story, ThreadAssignment};

pub fn random_clip<R: Rng>(rng: &mut R, dim: usize) -> ClipFeature {
    ClipFeature::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn story_from_labels<R: Rng>(rng: &mut R, labels: &[usize], dim: usize) -> Story {
    Story {
        id: "s".into(),
        clips: labels.iter().map(|_| random_clip(rng, dim)).collect(),
        ground_truth: Some(ThreadAssignment::from_canonical(labels.to_vec()).unwrap()),
        provenance: Default::default(),
    }
}

/// Every set partition of `0..t` as canonical 1-based labels (restricted
/// growth strings), built by direct recursion.
pub fn all_partitions(t: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, t: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == t {
            out.push(prefix.clone());
            return;
        }
        let max = prefix.iter().copied().max().unwrap_or(0);
        for l in 1..=max + 1 {
            prefix.push(l);
            go(prefix, t, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if t > 0 {
        go(&mut Vec::new(), t, &mut out);
    }
    out
}

/// Rand index by enumerating every unordered pair.
pub fn brute_ri(a: &[usize], b: &[usize]) -> f64 {
    let t = a.len();
    let mut agree = 0usize;
    let mut pairs = 0usize;
    for i in 0..t {
        for j in i + 1..t {
            pairs += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / pairs as f64
}

/// Upper-tail p-value of a chi-square statistic over equally likely cells.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}
