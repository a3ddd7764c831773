//! One test per acceptance criterion. Each prints a single `PASS` or `FAIL`
//! line (to the real stderr, so it survives output capture) and then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use unweave::config::RunConfig;
use unweave::pipeline::{self, Method};
use unweave_core::controller::{decide, softmax_with_temperature, ControllerKind, DecisionDistribution, UpdateKind};
use unweave_core::loss::{focal_loss, LossConfig};
use unweave_core::metrics::{
    bell, expected_dn_chance, expected_ri_chance, rand_index, stirling2, tfa,
};
use unweave_core::storygen::{
    plan_threads, sample_composition, sample_synthetic_story, weave, weave_template, SourceClip, SynthStoryConfig,
    World, WorldConfig,
};
use unweave_core::train::{derive_seed, NoopObserver};
use unweave_core::{canonicalize, scenario_of, ClipFeature, Model, ModelConfig, Scenario, ThreadAssignment, ThreadBank};

fn verdict(name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{word} {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn ta(labels: &[usize]) -> ThreadAssignment {
    ThreadAssignment::from_canonical(labels.to_vec()).unwrap()
}

fn all_partitions(t: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, max: usize, t: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == t {
            out.push(prefix.clone());
            return;
        }
        for l in 1..=max + 1 {
            prefix.push(l);
            go(prefix, max.max(l), t, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), 0, t, &mut out);
    out
}

fn brute_ri(a: &[usize], b: &[usize]) -> f64 {
    let mut agree = 0usize;
    let mut pairs = 0usize;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            pairs += 1;
            agree += usize::from((a[i] == a[j]) == (b[i] == b[j]));
        }
    }
    agree as f64 / pairs as f64
}

fn chi_square_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

/// Uniform draws from the set partitions of `0..t`: each next label is chosen
/// in proportion to the number of restricted growth strings that complete it.
struct PartitionSampler {
    t: usize,
    /// completions[i][m]: ways to finish from position i with m blocks opened.
    completions: Vec<Vec<f64>>,
}

impl PartitionSampler {
    fn new(t: usize) -> Self {
        let mut c = vec![vec![0.0; t + 2]; t + 1];
        c[t].fill(1.0);
        for i in (0..t).rev() {
            for m in 0..=t {
                c[i][m] = m as f64 * c[i + 1][m] + c[i + 1][m + 1];
            }
        }
        Self { t, completions: c }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.t);
        let mut m = 0;
        for i in 0..self.t {
            let stay = m as f64 * self.completions[i + 1][m];
            let total = stay + self.completions[i + 1][m + 1];
            if rng.random::<f64>() * total < stay {
                out.push(rng.random_range(1..=m));
            } else {
                m += 1;
                out.push(m);
            }
        }
        out
    }
}

#[test]
fn metric_oracles() {
    let start = Instant::now();
    let mut ok = true;
    let mut pairs = 0u64;
    for t in 2..=8 {
        let parts = all_partitions(t);
        let tas: Vec<ThreadAssignment> = parts.iter().map(|p| ta(p)).collect();
        for (a, ya) in parts.iter().zip(&tas) {
            for (b, yb) in parts.iter().zip(&tas) {
                pairs += 1;
                ok &= rand_index(ya, yb).unwrap() == brute_ri(a, b);
            }
        }
    }
    for t in 1..=10 {
        ok &= bell(t).unwrap() == all_partitions(t).len() as u128;
    }
    ok &= bell(10).unwrap() == 115_975;
    for t in 1..=12 {
        ok &= (1..=t).map(|n| stirling2(t, n).unwrap()).sum::<u128>() == bell(t).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "metric oracles",
        ok && secs < 60.0,
        &format!("{pairs} partition pairs, bell T<=10, stirling T<=12, {secs:.1}s"),
    );
}

#[test]
fn closed_form_expectations() {
    let mut worst_exact: f64 = 0.0;
    for t in 2..=10 {
        let parts = all_partitions(t);
        let mean_threads = parts.iter().map(|p| *p.iter().max().unwrap() as f64).sum::<f64>() / parts.len() as f64;
        // every truth at small T, a spread of them at larger T
        let stride = if t <= 7 { 1 } else { parts.len() / 60 };
        for g in parts.iter().step_by(stride) {
            let truth = ta(g);
            let ri = parts.iter().map(|p| brute_ri(g, p)).sum::<f64>() / parts.len() as f64;
            worst_exact = worst_exact.max((expected_ri_chance(&truth).unwrap() - ri).abs());
            let dn = mean_threads - *g.iter().max().unwrap() as f64;
            worst_exact = worst_exact.max((expected_dn_chance(&truth).unwrap() - dn).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_mc: f64 = 0.0;
    for t in 2..=14 {
        let sampler = PartitionSampler::new(t);
        let truths = [vec![1; t], (1..=t).collect::<Vec<_>>(), canonicalize(&(0..t).map(|i| i % 3).collect::<Vec<_>>()).unwrap().labels().to_vec()];
        let draws: Vec<Vec<usize>> = (0..100_000).map(|_| sampler.sample(&mut rng)).collect();
        for g in &truths {
            let truth = ta(g);
            let n = *g.iter().max().unwrap() as f64;
            let ri = draws.iter().map(|p| brute_ri(g, p)).sum::<f64>() / draws.len() as f64;
            let dn = draws.iter().map(|p| *p.iter().max().unwrap() as f64 - n).sum::<f64>() / draws.len() as f64;
            worst_mc = worst_mc.max((expected_ri_chance(&truth).unwrap() - ri).abs());
            worst_mc = worst_mc.max((expected_dn_chance(&truth).unwrap() - dn).abs());
        }
    }
    let anchor = expected_ri_chance(&ThreadAssignment::single_thread(10).unwrap()).unwrap();
    verdict(
        "closed-form expectations",
        worst_exact < 1e-9 && worst_mc < 0.01 && (anchor - 0.1823).abs() < 5e-5,
        &format!("exact err {worst_exact:.1e} (T<=10), Monte Carlo err {worst_mc:.4} (T<=14), single-thread T=10 chance RI {:.2}%", 100.0 * anchor),
    );
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let reports = unweave::cli::gradcheck(&cfg, true).unwrap();
    let worst = reports.iter().map(|(_, r)| r.overall_max).fold(0.0, f64::max);
    let names: Vec<String> = reports.iter().map(|(n, r)| format!("{n} {:.1e}", r.overall_max)).collect();
    let secs = start.elapsed().as_secs_f64();
    let complete = reports.len() == 4 && reports.iter().all(|(_, r)| r.absent().is_empty());
    verdict(
        "gradient correctness",
        complete && worst < 1e-4 && secs < 300.0,
        &format!("{} in {secs:.0}s", names.join(", ")),
    );
}

#[test]
#[allow(clippy::approx_constant)]
fn focal_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(2..14);
        let raw: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let y = canonicalize(&raw).unwrap();
        let mut seen = 0;
        let dists: Vec<DecisionDistribution> = y
            .labels()
            .iter()
            .map(|&l| {
                let k = seen + 1;
                seen = seen.max(l);
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                DecisionDistribution::new(raw.into_iter().map(|v| v / z).collect())
            })
            .collect();
        let nll: f64 = (2..=len).map(|t| -dists[t - 1].prob(y.label(t)).ln()).sum();
        worst = worst.max((focal_loss(&dists, &y, &LossConfig::nll()).unwrap().value - nll).abs());
    }
    let y = ta(&[1, 1]);
    let step = |p: f64, gamma: f64| {
        let d = vec![DecisionDistribution::new(vec![1.0]), DecisionDistribution::new(vec![p, 1.0 - p])];
        focal_loss(&d, &y, &LossConfig { gamma, ..LossConfig::nll() }).unwrap().value
    };
    let (a, b) = (step(0.5, 0.0), step(0.9, 2.0));
    verdict(
        "focal-loss identities",
        worst < 1e-9 && (a - 0.6931).abs() < 1e-4 && (a - std::f64::consts::LN_2).abs() < 1e-6 && (b - 1.0536e-3).abs() < 1e-6,
        &format!("NLL reduction err {worst:.1e} over 1000 cases, p=0.5 g=0 -> {a:.6}, p=0.9 g=2 -> {b:.4e}"),
    );
}

#[test]
fn weaving_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let t = rng.random_range(1..=20);
        let n = rng.random_range(1..=t.min(6));
        let m = sample_composition(t, n, &mut rng).unwrap();
        let threads: Vec<Vec<SourceClip>> = m
            .iter()
            .enumerate()
            .map(|(i, &mi)| {
                (0..mi)
                    .map(|j| SourceClip {
                        feature: ClipFeature::new(vec![i as f64, j as f64]).unwrap(),
                        offset: 1000 * i + j,
                        latent: None,
                    })
                    .collect()
            })
            .collect();
        let story = weave("w".into(), threads, 0, &mut rng).unwrap();
        let mut next = vec![0usize; n];
        for c in &story.clips {
            let (i, j) = (c.values()[0] as usize, c.values()[1] as usize);
            violations += usize::from(j != next[i]);
            next[i] += 1;
        }
    }

    let mut p_values = Vec::new();
    for (t, n) in [(6, 3), (8, 2), (10, 4)] {
        let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
        for _ in 0..100_000 {
            *counts.entry(sample_composition(t, n, &mut rng).unwrap()).or_default() += 1;
        }
        let cells = counts.len();
        let expected = (1..n).fold(1usize, |acc, k| acc * (t - k) / k);
        let p = chi_square_p(&counts.into_values().collect::<Vec<_>>());
        p_values.push((format!("composition ({t},{n})"), p, cells == expected));
    }
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for _ in 0..120_000 {
        *counts.entry(weave_template(&[1, 1, 2], &mut rng)).or_default() += 1;
    }
    let cells = counts.len();
    p_values.push((
        "template (1,1,2)".into(),
        chi_square_p(&counts.into_values().collect::<Vec<_>>()),
        cells == 12,
    ));

    let cfg = SynthStoryConfig::desk();
    let mut plans = 0usize;
    let mut too_close = 0usize;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=cfg.max_threads);
        let m = sample_composition(cfg.clips, n, &mut rng).unwrap();
        let Ok(p) = plan_threads(rng.random_range(cfg.min_stream_len..5000), &m, &cfg, &mut rng) else {
            continue;
        };
        plans += 1;
        let mut spans: Vec<(usize, usize)> = p.iter().map(|t| (t.start(), t.end(cfg.clip_len))).collect();
        spans.sort_unstable();
        too_close += spans.windows(2).filter(|w| w[1].0 < w[0].1 + cfg.separation).count();
    }

    let uniform = p_values.iter().all(|(_, p, cells)| *p > 0.001 && *cells);
    let ps: Vec<String> = p_values.iter().map(|(n, p, _)| format!("{n} p={p:.3}")).collect();
    verdict(
        "weaving suite",
        violations == 0 && uniform && too_close == 0 && plans > 5000,
        &format!(
            "{violations} order violations in 10000 weaves; {}; {too_close} separation violations in {plans} plans",
            ps.join(", ")
        ),
    );
}

#[test]
fn thread_bank_state_machine() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let models: Vec<Model> = [UpdateKind::Gru, UpdateKind::LastClip]
        .into_iter()
        .map(|u| Model::init(ModelConfig::desk(ControllerKind::Linear, u), &mut rng).unwrap())
        .collect();
    let mut changed = 0usize;
    let mut bad_size = 0usize;
    let mut updates = 0usize;
    for k in 0..10_000 {
        let m = &models[k % 2];
        let mut bank = ThreadBank::new();
        for _ in 0..rng.random_range(1..25) {
            let before = bank.states().to_vec();
            let d = rng.random_range(1..=bank.len() + 1);
            let clip = ClipFeature::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            bank.apply(&clip, d, m).unwrap();
            updates += 1;
            for (i, s) in before.iter().enumerate() {
                if i + 1 != d {
                    let same = s.iter().zip(&bank.states()[i]).all(|(a, b)| a.to_bits() == b.to_bits());
                    changed += usize::from(!same);
                }
            }
            bad_size += usize::from(bank.storage_len() != bank.len() * 32);
        }
    }
    // storage does not grow with story length once the thread count is fixed
    let mut bank = ThreadBank::new();
    let mut lens = Vec::new();
    for t in 0..5000 {
        let d = if t < 4 { t + 1 } else { rng.random_range(1..=4) };
        let clip = ClipFeature::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        bank.apply(&clip, d, &models[0]).unwrap();
        lens.push(bank.storage_len());
    }
    let flat = lens[3..].iter().all(|&l| l == 4 * 32);
    verdict(
        "thread-bank state machine",
        changed == 0 && bad_size == 0 && flat,
        &format!("{updates} updates over 10000 sequences, {changed} untouched slots changed; storage n*D (4*32 after 5000 clips)"),
    );
}

#[test]
fn controller_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut argmax_mismatch = 0usize;
    for _ in 0..10_000 {
        let n = rng.random_range(1..16);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        for tau in [0.01, 0.05, 0.5, 1.0, 5.0] {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            argmax_mismatch += usize::from(decide(&p) != best + 1);
        }
    }
    let mut worst = [0.0f64; 2];
    for (slot, kind) in [ControllerKind::Linear, ControllerKind::Transformer].into_iter().enumerate() {
        let m = Model::init(ModelConfig::desk(kind, UpdateKind::Gru), &mut rng).unwrap();
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let mut bank = ThreadBank::new();
            for k in 0..n {
                let clip = ClipFeature::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                bank.apply(&clip, k + 1, &m).unwrap();
            }
            let clip = ClipFeature::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let base = m.logits(&clip, &bank).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let moved = m.logits(&clip, &bank.permuted(&perm)).unwrap();
            for (k, &p) in perm.iter().enumerate() {
                worst[slot] = worst[slot].max((moved[k] - base[p]).abs());
            }
            worst[slot] = worst[slot].max((moved[n] - base[n]).abs());
        }
    }
    verdict(
        "controller invariants",
        argmax_mismatch == 0 && worst[0] == 0.0 && worst[1] <= 1e-5,
        &format!(
            "{argmax_mismatch} argmax changes over 10000 logit vectors x 5 temperatures; permutation error linear {:.1e}, transformer {:.1e}",
            worst[0], worst[1]
        ),
    );
}

struct SeedRun {
    seed: u64,
    ss_as: f64,
    as_only: f64,
    cluster: f64,
    elapsed: Duration,
}

fn end_to_end(seed: u64) -> SeedRun {
    let start = Instant::now();
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    let world = pipeline::build_world(&cfg).unwrap();
    let splits = pipeline::natural_splits(&cfg, &world).unwrap();
    let regimes = pipeline::run_regimes(&cfg, &world, &splits, &mut NoopObserver).unwrap();
    let ri = |m: Method| {
        pipeline::evaluate("m", &m, &splits.test, 1).unwrap().overall.mean_ri.unwrap()
    };
    let fitted = pipeline::fit_baselines(&cfg, &splits.val).unwrap();
    let cluster = ri(Method::Cluster(fitted.cluster));
    let ss_as = ri(Method::Model(regimes.ss_as.model));
    let as_only = ri(Method::Model(regimes.as_only.model));
    SeedRun {
        seed,
        ss_as,
        as_only,
        cluster,
        elapsed: start.elapsed(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn end_to_end_desk_training() {
    let runs: Vec<SeedRun> = [42, 7, 3].into_iter().map(end_to_end).collect();
    let main = &runs[0];
    let gap = median(runs.iter().map(|r| r.ss_as - r.as_only).collect());
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} SS+AS {:.3} AS {:.3}", r.seed, r.ss_as, r.as_only))
        .collect();
    verdict(
        "end-to-end desk training",
        main.ss_as >= 0.85 && main.ss_as > main.cluster && main.elapsed.as_secs() < 900 && gap >= 0.0,
        &format!(
            "seed 42 test RI {:.3} vs clustering {:.3} in {:.0}s; median SS+AS - AS {gap:+.3} ({})",
            main.ss_as,
            main.cluster,
            main.elapsed.as_secs_f64(),
            per_seed.join(", ")
        ),
    );
}

/// Teacher-forced Resume accuracy of a short pretraining run with `alpha_resume`.
fn resume_accuracy(seed: u64, alpha_resume: f64) -> f64 {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.pretrain.steps = 600;
    cfg.pretrain.checkpoint_every = 0;
    cfg.pretrain.schedule = unweave_core::optim::LrSchedule::constant(1e-3);
    cfg.pretrain.loss.alpha_resume = alpha_resume;
    let world = pipeline::build_world(&cfg).unwrap();
    let streams = pipeline::pretrain_streams(&cfg, &world).unwrap();
    let model = pipeline::init_model(&cfg).unwrap();
    let trained = pipeline::run_pretrain(&cfg, model, streams, &mut NoopObserver).unwrap().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA1));
    let held_out = world.stream(cfg.world.stream_len, &mut rng).unwrap();
    let stories: Vec<_> = (0..600)
        .map(|i| sample_synthetic_story(&held_out, 99, format!("h{i}"), &cfg.synthetic, &mut rng).unwrap())
        .collect();
    let report = tfa(&trained.model, &stories).unwrap();
    report.scenario(Scenario::Resume).mean().unwrap()
}

#[test]
fn scenario_weight_direction() {
    let mut deltas = Vec::new();
    let mut detail = Vec::new();
    for seed in [42, 7, 3] {
        let low = resume_accuracy(seed, 1.0);
        let high = resume_accuracy(seed, 100.0);
        deltas.push(high - low);
        detail.push(format!("seed {seed}: {low:.3} -> {high:.3}"));
    }
    let med = median(deltas);
    verdict(
        "scenario-weight direction",
        med >= 0.0,
        &format!("Resume recall alpha_R 1 -> 100, median change {med:+.3} ({})", detail.join(", ")),
    );
}

#[test]
fn synthetic_label_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(42, 0xB2));
    let wc = WorldConfig::desk();
    let world = World::sample(wc.clone(), &mut rng).unwrap();
    let streams: Vec<_> = (0..4).map(|_| world.stream(wc.stream_len, &mut rng).unwrap()).collect();
    let cfg = SynthStoryConfig::desk();
    let (mut c_same, mut c_all, mut n_diff, mut n_all) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..10_000 {
        let s = sample_synthetic_story(&streams[i % 4], (i % 4) as u64, format!("x{i}"), &cfg, &mut rng).unwrap();
        let y = s.ground_truth.as_ref().unwrap();
        let lat = s.provenance.latent_ids.as_ref().unwrap();
        for t in 2..=y.len() {
            let same = lat[t - 1] == lat[t - 2];
            match scenario_of(y, t).unwrap() {
                Scenario::Continue => {
                    c_all += 1;
                    c_same += usize::from(same);
                }
                Scenario::New => {
                    n_all += 1;
                    n_diff += usize::from(!same);
                }
                Scenario::Resume => {}
            }
        }
    }
    let c = c_same as f64 / c_all as f64;
    let n = n_diff as f64 / n_all as f64;
    verdict(
        "synthetic label noise",
        c >= 0.90 && n >= 0.95,
        &format!("Continue share same latent {:.1}% of {c_all}, New differ {:.1}% of {n_all} (10000 stories)", 100.0 * c, 100.0 * n),
    );
}
