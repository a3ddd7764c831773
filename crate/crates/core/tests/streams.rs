use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unweave_core::storygen::*;
use unweave_core::{scenario_of, Scenario};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[test]
fn stream_shapes_and_unit_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut wc = WorldConfig::desk();
    wc.stream_len = 3000;
    let s = generate_stream(&wc, &mut rng).unwrap();
    assert_eq!(s.len(), 3000);
    assert_eq!(s.latent().len(), 3000);
    for t in (0..3000).step_by(97) {
        let n: f64 = s.feature(t).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn same_segment_timesteps_are_closer_than_cross_segment_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut wc = WorldConfig::desk();
    wc.stream_len = 50_000;
    let s = generate_stream(&wc, &mut rng).unwrap();
    let segs = s.segments();
    let (mut same, mut diff) = (0.0, 0.0);
    let pairs = 10_000;
    for _ in 0..pairs {
        let g = segs[rng.random_range(0..segs.len())];
        let a = g.start + rng.random_range(0..g.len);
        let b = g.start + rng.random_range(0..g.len);
        same += cos(s.feature(a), s.feature(b));
        let (x, y) = loop {
            let x = rng.random_range(0..s.len());
            let y = rng.random_range(0..s.len());
            if s.latent()[x] != s.latent()[y] {
                break (x, y);
            }
        };
        diff += cos(s.feature(x), s.feature(y));
    }
    let margin = (same - diff) / pairs as f64;
    assert!(margin > 0.2, "margin {margin}");
}

#[test]
fn synthetic_label_noise_is_low_at_defaults() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wc = WorldConfig::desk();
    let world = World::sample(wc.clone(), &mut rng).unwrap();
    let stream = world.stream(wc.stream_len, &mut rng).unwrap();
    let cfg = SynthStoryConfig::desk();
    let (mut cs, mut ct, mut nd, mut nt) = (0, 0, 0, 0);
    for _ in 0..2000 {
        let s = sample_synthetic_story(&stream, 0, "x".into(), &cfg, &mut rng).unwrap();
        let y = s.ground_truth.as_ref().unwrap();
        let lat = s.provenance.latent_ids.as_ref().unwrap();
        for t in 2..=y.len() {
            let same = lat[t - 1] == lat[t - 2];
            match scenario_of(y, t).unwrap() {
                Scenario::Continue => {
                    ct += 1;
                    cs += same as usize;
                }
                Scenario::New => {
                    nt += 1;
                    nd += !same as usize;
                }
                Scenario::Resume => {}
            }
        }
    }
    assert!(cs as f64 / ct as f64 >= 0.90, "{cs}/{ct}");
    assert!(nd as f64 / nt as f64 >= 0.95, "{nd}/{nt}");
}

#[test]
fn natural_stories_stay_in_bounds_and_balance_buckets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let wc = WorldConfig::desk();
    let world = World::sample(wc.clone(), &mut rng).unwrap();
    let stream = world.stream(60_000, &mut rng).unwrap();
    let nc = NaturalStoryConfig::desk();
    let stories = sample_balanced_natural_stories(&stream, 9, "n", 5, 3, &nc, 50_000, &mut rng).unwrap();
    assert_eq!(stories.len(), 15);
    for (i, s) in stories.iter().enumerate() {
        assert_eq!(s.id, format!("n{i}"));
        assert!((nc.min_clips..=nc.max_clips).contains(&s.len()));
        assert_eq!(s.provenance.stream_id, 9);
        let y = s.ground_truth.as_ref().unwrap();
        assert_eq!(y.num_threads(), i / 5 + 1);
        assert!(s.provenance.source_offsets.last().unwrap() + nc.clip_len <= stream.len());
    }
}

#[test]
fn stream_generation_is_deterministic() {
    let wc = WorldConfig {
        stream_len: 2000,
        ..WorldConfig::desk()
    };
    let a = generate_stream(&wc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = generate_stream(&wc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}
