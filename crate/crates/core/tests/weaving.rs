mod common;

use std::collections::HashMap;

use common::chi_square_uniform_p;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unweave_core::storygen::*;
use unweave_core::ClipFeature;

fn tagged_threads(m: &[usize]) -> Vec<Vec<SourceClip>> {
    m.iter()
        .enumerate()
        .map(|(i, &mi)| {
            (0..mi)
                .map(|j| SourceClip {
                    feature: ClipFeature::new(vec![(100 * i + j) as f64]).unwrap(),
                    offset: 100 * i + j,
                    latent: Some(i),
                })
                .collect()
        })
        .collect()
}

#[test]
fn weaving_keeps_each_thread_in_source_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let t = rng.random_range(1..16);
        let n = rng.random_range(1..=t.min(5));
        let m = sample_composition(t, n, &mut rng).unwrap();
        let story = weave("w".into(), tagged_threads(&m), 0, &mut rng).unwrap();
        let y = story.ground_truth.as_ref().unwrap();
        assert_eq!(story.len(), t);
        let mut next = vec![0usize; n];
        // thread labels are in first-appearance order, so map source thread to label
        let mut label_of: HashMap<usize, usize> = HashMap::new();
        for (k, c) in story.clips.iter().enumerate() {
            let tag = c.values()[0] as usize;
            let (thread, j) = (tag / 100, tag % 100);
            assert_eq!(j, next[thread]);
            next[thread] += 1;
            let l = *label_of.entry(thread).or_insert(y.label(k + 1));
            assert_eq!(l, y.label(k + 1));
        }
        assert_eq!(next, m);
    }
}

#[test]
fn compositions_are_valid_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (t, n, cells) in [(3, 2, 2), (6, 3, 10), (8, 2, 7)] {
        let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
        for _ in 0..20_000 {
            let m = sample_composition(t, n, &mut rng).unwrap();
            assert_eq!(m.iter().sum::<usize>(), t);
            assert!(m.iter().all(|&x| x >= 1));
            *counts.entry(m).or_default() += 1;
        }
        assert_eq!(counts.len(), cells);
        let c: Vec<u64> = counts.into_values().collect();
        assert!(chi_square_uniform_p(&c) > 0.001, "({t},{n})");
    }
    assert_eq!(sample_composition(5, 1, &mut rng).unwrap(), vec![5]);
    assert!(sample_composition(3, 4, &mut rng).is_err());
    assert!(sample_composition(3, 0, &mut rng).is_err());
}

#[test]
fn templates_are_uniform_over_distinct_arrangements() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for _ in 0..24_000 {
        let q = weave_template(&[1, 1, 2], &mut rng);
        *counts.entry(q).or_default() += 1;
    }
    assert_eq!(counts.len(), 12);
    let c: Vec<u64> = counts.into_values().collect();
    assert!(chi_square_uniform_p(&c) > 0.001);
}

#[test]
fn plans_respect_gaps_separation_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SynthStoryConfig::desk();
    for _ in 0..2000 {
        let n = rng.random_range(1..=cfg.max_threads);
        let m = sample_composition(cfg.clips, n, &mut rng).unwrap();
        let len = rng.random_range(cfg.min_stream_len..4000);
        let plans = match plan_threads(len, &m, &cfg, &mut rng) {
            Ok(p) => p,
            Err(_) => continue,
        };
        for (p, &mi) in plans.iter().zip(&m) {
            assert_eq!(p.offsets.len(), mi);
            assert!(p.end(cfg.clip_len) <= len);
            for w in p.offsets.windows(2) {
                let gap = w[1] - w[0] - cfg.clip_len;
                assert!((cfg.gap_min..=cfg.gap_max).contains(&gap));
            }
        }
        let mut spans: Vec<(usize, usize)> = plans.iter().map(|p| (p.start(), p.end(cfg.clip_len))).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            assert!(w[1].0 >= w[0].1 + cfg.separation);
        }
    }
}

#[test]
fn short_streams_are_refused() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SynthStoryConfig::desk();
    assert!(plan_threads(cfg.min_stream_len - 1, &[10], &cfg, &mut rng).is_err());
    // three separations of 240 plus four spans of at least 112
    assert!(plan_threads(cfg.min_stream_len, &[10, 10, 10, 10], &cfg, &mut rng).is_err());
}

#[test]
fn single_thread_story_is_the_thread() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SynthStoryConfig {
        max_threads: 1,
        ..SynthStoryConfig::desk()
    };
    let mut wc = WorldConfig::desk();
    wc.stream_len = 5000;
    let stream = generate_stream(&wc, &mut rng).unwrap();
    for _ in 0..50 {
        let s = sample_synthetic_story(&stream, 0, "s".into(), &cfg, &mut rng).unwrap();
        assert!(s.ground_truth.as_ref().unwrap().labels().iter().all(|&l| l == 1));
        let offs = &s.provenance.source_offsets;
        assert!(offs.windows(2).all(|w| w[0] < w[1]));
    }
}
