//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use refocus::analysis::{
    distribution_distances, kl_entropy, likelihood_bins_eval, selection_time_entropy, vniah_sweep, BinSide,
    SamplingOptions,
};
use refocus::filterpipe::{calibrate_tau, probe_episode, score_and_filter, temporal_windows, DEFAULT_PROBE_K};
use refocus::policy::{
    objective_and_gradient, objective_value, sample_subsets, subset_logprob, EntropyMode, GroupBatch, PolicyDims,
    PolicyParams, StepDistribution,
};
use refocus::reward::{confidence_ratio_margin, margin_reward};
use refocus::synthenv::{
    gen_dataset, gen_episode, gen_episode_with_needles, EnvConfig, Episode, OptionLogits, OracleConfig,
    SyntheticOracle,
};
use refocus::trainer::{train, MemorySink, StepMetrics, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] criterion {id:>2} {name}: {} ({:.1}s)",
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    };

    report(1, "identities", &mut identities);
    report(2, "gradient", &mut gradient_check);
    report(3, "sampling", &mut sampling);
    let mut trained = None;
    report(4, "learning", &mut || {
        let (o, p) = learning();
        trained = Some(p);
        o
    });
    let policy = trained.expect("learning run produced a policy");
    report(5, "needle sweep", &mut || needle_sweep(&policy));
    report(6, "likelihood bins", &mut || likelihood_bins(&policy));
    report(7, "entropy trend", &mut entropy_trend);
    report(8, "filtering", &mut filtering);
    report(9, "distance oracles", &mut distance_oracles);
    report(10, "cli determinism", &mut cli_determinism);

    println!(
        "acceptance: {} of 10 criteria passed in {:.1}s",
        10 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ratio_err: f64 = 0.0;
    for _ in 0..10_000 {
        let m = rng.random_range(2..8);
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-12.0..12.0)).collect();
        let c = rng.random_range(0..m);
        let logits = OptionLogits(z.clone());
        let tanh_form = margin_reward(&logits, c).unwrap().margin;
        let ratio_form = confidence_ratio_margin(&logits, c).unwrap();
        ratio_err = ratio_err.max((tanh_form - ratio_form).abs());
    }

    let mut ident_err: f64 = 0.0;
    for _ in 0..10_000 {
        let t = rng.random_range(2..40);
        let logits: Vec<f64> = (0..t).map(|_| rng.random_range(-6.0..6.0)).collect();
        let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.4)).collect();
        let keep = rng.random_range(0..t);
        mask[keep] = false;
        let d = StepDistribution::from_logits(logits, &mask).unwrap();
        let lhs = d.entropy + d.kl_to_uniform();
        ident_err = ident_err.max((lhs - (d.available as f64).ln()).abs());
    }
    let pass = ratio_err <= 1e-12 && ident_err <= 1e-12;
    outcome(
        pass,
        format!("ratio vs tanh max err {ratio_err:.2e}, H + KL - ln|A| max err {ident_err:.2e} (tol 1e-12)"),
    )
}

// ---------------------------------------------------------------- 2

struct FdCase {
    params: PolicyParams,
    episodes: Vec<Episode>,
    subsets: Vec<Vec<Vec<usize>>>,
    old: Vec<Vec<f64>>,
    adv: Vec<Vec<f64>>,
    beta: f64,
}

impl FdCase {
    fn batch(&self) -> Vec<GroupBatch<'_>> {
        self.episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| GroupBatch {
                episode: ep,
                subsets: &self.subsets[i],
                old_logps: &self.old[i],
                advantages: &self.adv[i],
            })
            .collect()
    }
}

fn fd_case(seed: u64) -> FdCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_prime = rng.random_range(1..=4);
    let t = rng.random_range(t_prime.max(2)..=12);
    let d_in = rng.random_range(2..5);
    let d_q = rng.random_range(1..4);
    let env = EnvConfig {
        t,
        l: rng.random_range(1..4),
        d_in,
        d_q,
        n_needle: rng.random_range(1..=t.min(3)),
        ..EnvConfig::default()
    };
    let dims = PolicyDims {
        d_in,
        d_q,
        d_e: rng.random_range(2..5),
        d_model: rng.random_range(2..5),
        d_g: rng.random_range(2..5),
    };
    let mut params = PolicyParams::init(dims, seed).unwrap();
    params.s = rng.random_range(0.5..2.0);
    let n_eps = rng.random_range(1..=2);
    let episodes: Vec<Episode> = (0..n_eps).map(|i| gen_episode(&env, seed * 7 + i).unwrap()).collect();
    let mut subsets = Vec::new();
    let mut old = Vec::new();
    let mut adv = Vec::new();
    for ep in &episodes {
        let n = rng.random_range(2..=4);
        let cands = sample_subsets(&params, ep, t_prime, n, seed).unwrap();
        subsets.push(cands.iter().map(|c| c.indices.clone()).collect());
        old.push(cands.iter().map(|c| c.logp() + rng.random_range(-0.3..0.3)).collect());
        adv.push((0..n).map(|_| rng.random_range(-1.5..1.5)).collect());
    }
    FdCase {
        params,
        episodes,
        subsets,
        old,
        adv,
        beta: rng.random_range(0.0..0.2),
    }
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut scalars = 0;
    for seed in 0..100u64 {
        let case = fd_case(seed);
        let batch = case.batch();
        let an = objective_and_gradient(&case.params, &batch, case.beta, EntropyMode::Mean).unwrap();
        let analytic: Vec<f64> = an.grads.blocks().iter().flat_map(|(_, b)| b.to_vec()).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let n_blocks = case.params.blocks().len();
        for b in 0..n_blocks {
            let len = case.params.blocks()[b].1.len();
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut p = case.params.clone();
                    p.blocks_mut()[b].1[i] += delta;
                    objective_value(&p, &batch, case.beta, EntropyMode::Mean).unwrap()
                };
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        scalars += numeric.len();
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
    }
    outcome(
        worst < 1e-5,
        format!("100 configs, {scalars} scalars, worst relative error {worst:.2e} (tol 1e-5)"),
    )
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- 3

fn sampling() -> Outcome {
    let env = EnvConfig {
        t: 12,
        l: 2,
        d_in: 4,
        d_q: 3,
        n_needle: 2,
        ..EnvConfig::default()
    };
    let dims = PolicyDims {
        d_in: 4,
        d_q: 3,
        d_e: 5,
        d_model: 4,
        d_g: 5,
    };
    let params = PolicyParams::init(dims, 3).unwrap();
    let ep = gen_episode(&env, 3).unwrap();
    let mut duplicates = 0;
    for c in sample_subsets(&params, &ep, 6, 100_000, 11).unwrap() {
        let set: HashSet<usize> = c.indices.iter().copied().collect();
        duplicates += usize::from(set.len() != c.indices.len());
    }

    let small_env = EnvConfig { t: 4, n_needle: 1, ..env.clone() };
    let small = gen_episode(&small_env, 5).unwrap();
    let mut flat = params.clone();
    flat.s = 0.0;
    let n = 100_000;
    let mut counts = BTreeMap::new();
    for c in sample_subsets(&flat, &small, 2, n, 13).unwrap() {
        *counts.entry((c.indices[0], c.indices[1])).or_insert(0usize) += 1;
    }
    let mut pair_dev: f64 = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                let f = counts.get(&(a, b)).copied().unwrap_or(0) as f64 / n as f64;
                pair_dev = pair_dev.max((f - 1.0 / 12.0).abs());
            }
        }
    }

    let mut ratio_err: f64 = 0.0;
    for c in sample_subsets(&params, &ep, 6, 2_000, 17).unwrap() {
        let (logp, _) = subset_logprob(&params, &ep, &c.indices).unwrap();
        ratio_err = ratio_err.max(((logp - c.logp()).exp() - 1.0).abs());
    }

    let pass = duplicates == 0 && counts.len() == 12 && pair_dev <= 0.003 && ratio_err <= 1e-12;
    outcome(
        pass,
        format!(
            "{duplicates} subsets with duplicates of 100000, {} ordered pairs seen, max |freq - 1/12| {pair_dev:.4} (tol 0.003), max |ratio - 1| {ratio_err:.2e} (tol 1e-12)",
            counts.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected margin of a uniformly drawn subset: the number of needles hit is
/// hypergeometric and the correct logit is `gain * hits / n_needle + bias`
/// against distractors at zero.
fn uniform_baseline(env: &EnvConfig, t_prime: usize, oracle: &OracleConfig) -> f64 {
    let (t, n, k) = (env.t as u64, env.n_needle as u64, t_prime as u64);
    let total = binomial(t, k);
    (0..=n.min(k))
        .map(|h| {
            let p = binomial(n, h) * binomial(t - n, k - h) / total;
            let z = oracle.gain_a * h as f64 / n as f64 + oracle.bias_b;
            p * (z / 2.0).tanh()
        })
        .sum()
}

fn tail_mean(steps: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> f64 {
    let tail = &steps[steps.len().saturating_sub(200)..];
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

fn learning_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        total_steps: 2000,
        seed,
        ..TrainConfig::default()
    }
}

fn learning() -> (Outcome, PolicyParams) {
    let env = EnvConfig::default();
    let oracle_cfg = OracleConfig::default();
    let oracle = SyntheticOracle::new(oracle_cfg.clone()).unwrap();
    let cfg = learning_config(7);
    let data = gen_dataset(&env, 1024, 7).unwrap();
    let init = PolicyParams::init(cfg.dims, 7).unwrap();
    let mut sink = MemorySink::default();
    let params = train(&cfg, init, &data, &oracle, &mut sink, None).unwrap();
    let baseline = uniform_baseline(&env, cfg.t_prime, &oracle_cfg);
    let reward = tail_mean(&sink.steps, |m| m.mean_reward);
    let recall = tail_mean(&sink.steps, |m| m.needle_recall);
    let first = sink.steps[..200].iter().map(|m| m.mean_reward).sum::<f64>() / 200.0;
    let pass = reward >= baseline + 0.3 && recall >= 0.9;
    (
        outcome(
            pass,
            format!(
                "{} steps, first-200 reward {first:.3}, final-200 reward {reward:.3} vs uniform baseline {baseline:.3} (need +0.3), final-200 recall {recall:.3} (need 0.9)",
                sink.steps.len()
            ),
        ),
        params,
    )
}

// ---------------------------------------------------------------- 5

fn needle_sweep(params: &PolicyParams) -> Outcome {
    let frame_counts = [64, 128, 192, 256, 384, 512];
    let positions = [0.1, 0.26, 0.42, 0.58, 0.74, 0.9];
    let opts = SamplingOptions {
        t_prime: 8,
        n_runs: 32,
        seed: 21,
    };
    let make = |t: usize, needle: usize| {
        let env = EnvConfig {
            t,
            n_needle: 1,
            ..EnvConfig::default()
        };
        gen_episode_with_needles(&env, 1000 + t as u64, &[needle])
    };
    let grid = vniah_sweep(params, make, &frame_counts, &positions, opts).unwrap();
    let mut good = 0;
    let mut worst = f64::INFINITY;
    for (r, row) in grid.cells.iter().enumerate() {
        for &mass in row {
            let ratio = mass * frame_counts[r] as f64;
            worst = worst.min(ratio);
            good += usize::from(ratio >= 5.0);
        }
    }
    let frac = good as f64 / 36.0;
    outcome(
        frac >= 0.9,
        format!("{good}/36 cells with needle mass >= 5/T ({:.0}%, need 90%), smallest mass x T {worst:.2}", frac * 100.0),
    )
}

// ---------------------------------------------------------------- 6

fn likelihood_bins(params: &PolicyParams) -> Outcome {
    let held_out = gen_dataset(&EnvConfig::default(), 200, 9_000).unwrap();
    let oracle = SyntheticOracle::default();
    let ks = [20, 40, 60, 80];
    let opts = SamplingOptions {
        t_prime: 8,
        n_runs: 32,
        seed: 23,
    };
    let table = likelihood_bins_eval(params, &held_out, &oracle, &ks, 32, opts).unwrap();
    let over20 = table.accuracy(20, BinSide::Over).unwrap();
    let under: Vec<f64> = ks.iter().map(|&k| table.accuracy(k, BinSide::Under).unwrap()).collect();
    let inversions = under.windows(2).filter(|w| w[1] < w[0]).count();
    let pass = over20 >= under[3] && inversions <= 1;
    outcome(
        pass,
        format!(
            "over-20 {over20:.3} vs under-80 {:.3}; under-k for k=20..80 {under:.3?} with {inversions} inversion(s) (max 1); all-frame baseline {:.3}",
            under[3], table.baseline
        ),
    )
}

// ---------------------------------------------------------------- 7

fn entropy_trend() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 20_000;
    let unif: Vec<f64> = Uniform::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(n).collect();
    let normal: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let h_unif = kl_entropy(&unif, 1).unwrap().entropy;
    let h_norm = kl_entropy(&normal, 1).unwrap().entropy;
    let exact_norm = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let estimator_ok = h_unif.abs() <= 0.05 && (h_norm - exact_norm).abs() <= 0.05;

    let env = EnvConfig {
        n_needle: 4,
        needle_window: Some(16),
        ..EnvConfig::default()
    };
    let oracle = SyntheticOracle::default();
    let data = gen_dataset(&env, 512, 41).unwrap();
    let held_out = gen_dataset(&env, 48, 43).unwrap();
    let entropy_for = |t_prime: usize| {
        let cfg = TrainConfig {
            t_prime,
            batch_size: 8,
            total_steps: 400,
            lr_heads: 1e-3,
            lr_backbone: 1e-3,
            seed: 41,
            ..TrainConfig::default()
        };
        let init = PolicyParams::init(cfg.dims, 41).unwrap();
        let params = train(&cfg, init, &data, &oracle, &mut MemorySink::default(), None).unwrap();
        held_out
            .iter()
            .map(|ep| selection_time_entropy(&params, ep, t_prime, 16, 1, 47).unwrap())
            .sum::<f64>()
            / held_out.len() as f64
    };
    let h4 = entropy_for(4);
    let h32 = entropy_for(32);
    outcome(
        estimator_ok && h4 < h32,
        format!(
            "H(T'=4) {h4:.3} < H(T'=32) {h32:.3}; estimator on Uniform {h_unif:+.4} (exact 0), Normal {h_norm:.4} (exact {exact_norm:.4}), tol 0.05"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn filtering() -> Outcome {
    let env = EnvConfig {
        frame_blind_fraction: 0.5,
        ..EnvConfig::default()
    };
    let oracle = SyntheticOracle::new(OracleConfig {
        noise_std: 0.1,
        ..OracleConfig::default()
    })
    .unwrap();
    let calib = gen_dataset(&env, 200, 51).unwrap();
    let test = gen_dataset(&env, 400, 53).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for ep in &calib {
        let (_, v) = probe_episode(ep, &oracle, DEFAULT_PROBE_K).unwrap();
        if ep.grounded { pos.push(v) } else { neg.push(v) }
    }
    let tau = calibrate_tau(&pos, &neg).unwrap();
    let (_, report) = score_and_filter(&test, &oracle, tau, DEFAULT_PROBE_K).unwrap();
    let (mut needle_kept, mut needle_total, mut blind_kept, mut blind_total) = (0, 0, 0, 0);
    for (ep, probe) in test.iter().zip(&report.episodes) {
        if ep.grounded {
            needle_total += 1;
            needle_kept += usize::from(probe.retained);
        } else {
            blind_total += 1;
            blind_kept += usize::from(probe.retained);
        }
    }
    let needle_rate = needle_kept as f64 / needle_total as f64;
    let blind_rate = blind_kept as f64 / blind_total as f64;

    let spec = temporal_windows(16, DEFAULT_PROBE_K).unwrap();
    let mut windows_ok = spec.w == 2 && spec.stride == 1;
    for i in 0..7 {
        windows_ok &= spec.window(i) == vec![i, i + 1];
    }
    let mut last = vec![0];
    last.extend(7..16);
    windows_ok &= spec.window(7) == last;
    windows_ok &= spec.complement(0) == (2..16).collect::<Vec<_>>();

    let pass = needle_rate >= 0.8 && blind_rate <= 0.05 && windows_ok;
    outcome(
        pass,
        format!(
            "tau {tau:.4} calibrated on 200 held-out episodes; test retains {needle_kept}/{needle_total} needle ({:.1}%, need 80%) and {blind_kept}/{blind_total} frame-independent ({:.1}%, max 5%); T=16 windows {}",
            needle_rate * 100.0,
            blind_rate * 100.0,
            if windows_ok { "match" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------- 9

fn kl_brute(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i] / q[i]).ln();
        }
    }
    s
}

/// W1 as the integral of the distance between quantile functions.
fn w1_quantile(p: &[f64], q: &[f64]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut left_p, mut left_q) = (p[0], q[0]);
    let mut total = 0.0;
    loop {
        while left_p <= 0.0 && i + 1 < p.len() {
            i += 1;
            left_p = p[i];
        }
        while left_q <= 0.0 && j + 1 < q.len() {
            j += 1;
            left_q = q[j];
        }
        let step = left_p.min(left_q);
        if step <= 1e-300 {
            break;
        }
        total += step * (i as f64 - j as f64).abs();
        left_p -= step;
        left_q -= step;
    }
    total
}

fn distance_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let p = random_pdf(&mut rng, n);
        let d = distribution_distances(&p, &p).unwrap();
        err = err.max(d.js.abs()).max(d.sym_kl.abs()).max(d.w1.abs());
    }
    for n in [2, 5, 17, 64] {
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let mut p = vec![0.0; n];
                let mut q = vec![0.0; n];
                p[a] = 1.0;
                q[b] = 1.0;
                let d = distribution_distances(&p, &q).unwrap();
                err = err.max((d.js - std::f64::consts::LN_2).abs());
                err = err.max((d.w1 - (a as f64 - b as f64).abs()).abs());
            }
        }
    }
    for _ in 0..500 {
        let n = rng.random_range(2..50);
        let p = random_pdf(&mut rng, n);
        let q = random_pdf(&mut rng, n);
        let d = distribution_distances(&p, &q).unwrap();
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
        let js = 0.5 * kl_brute(&p, &m) + 0.5 * kl_brute(&q, &m);
        let lam = refocus::analysis::SMOOTHING_LAMBDA;
        let u = 1.0 / n as f64;
        let ps: Vec<f64> = p.iter().map(|x| (1.0 - lam) * x + lam * u).collect();
        let qs: Vec<f64> = q.iter().map(|x| (1.0 - lam) * x + lam * u).collect();
        let skl = kl_brute(&ps, &qs) + kl_brute(&qs, &ps);
        err = err.max((d.js - js).abs()).max((d.sym_kl - skl).abs());
        err = err.max((d.w1 - w1_quantile(&p, &q)).abs());
    }
    outcome(
        err <= 1e-12,
        format!("identical, disjoint-delta and 500 random pairs, max err {err:.2e} (tol 1e-12)"),
    )
}

fn random_pdf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    if p.iter().sum::<f64>() == 0.0 {
        p[0] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

// ---------------------------------------------------------------- 10

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_refocus"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let env = ["--T", "32", "--d-in", "8", "--d-q", "4", "--workers", "1", "--seed", "5"];
    let with_env = |extra: &[String]| {
        let mut v: Vec<String> = env.iter().map(|s| s.to_string()).collect();
        v.extend(extra.iter().cloned());
        v
    };
    let s = |x: &str| x.to_string();
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen", {
            let mut v = vec![s("gen")];
            v.extend(with_env(&[s("--n"), s("24"), s("--out"), p("gen/data.jsonl")]));
            v
        }),
        ("filter", vec![
            s("filter"), s("--workers"), s("1"), s("--in"), p("gen/data.jsonl"), s("--out"), p("filter/kept.jsonl"),
        ]),
        ("train", {
            let mut v = vec![s("train")];
            v.extend(with_env(&[
                s("--data"), p("gen/data.jsonl"), s("--steps"), s("6"), s("--batch-size"), s("4"), s("--N"), s("4"),
                s("--t-prime"), s("4"), s("--checkpoint-every"), s("3"), s("--out-dir"), p("train"),
            ]));
            v
        }),
        ("analyze", {
            let mut v = vec![s("analyze")];
            v.extend(with_env(&[
                s("--checkpoint"), p("train/checkpoints/final.json"), s("--data"), p("gen/data.jsonl"), s("--t-prime"),
                s("4"), s("--n-runs"), s("4"), s("--plot-data"), s("--out-dir"), p("analyze"),
            ]));
            v
        }),
        ("niah", {
            let mut v = vec![s("niah")];
            v.extend(with_env(&[
                s("--checkpoint"), p("train/checkpoints/final.json"), s("--t-prime"), s("4"), s("--n-runs"), s("4"),
                s("--frame-counts"), s("16,32"), s("--positions"), s("0.1,0.9"), s("--out-dir"), p("niah"),
            ]));
            v
        }),
        ("bins", {
            let mut v = vec![s("bins")];
            v.extend(with_env(&[
                s("--checkpoint"), p("train/checkpoints/final.json"), s("--data"), p("gen/data.jsonl"), s("--t-prime"),
                s("4"), s("--n-runs"), s("4"), s("--subsets-per-bin"), s("4"), s("--out-dir"), p("bins"),
            ]));
            v
        }),
    ];
    let mut identical = Vec::new();
    let mut broken = Vec::new();
    for (name, args) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let dir = root.join(name);
        if !run_cli(&args) {
            broken.push(*name);
            continue;
        }
        let first = snapshot(&dir);
        std::fs::rename(&dir, root.join(format!("{name}.first"))).unwrap();
        if !run_cli(&args) {
            broken.push(*name);
            continue;
        }
        let second = snapshot(&dir);
        if first == second && !first.is_empty() {
            identical.push(*name);
        } else {
            broken.push(*name);
        }
    }
    outcome(
        broken.is_empty(),
        format!("byte-identical repeat runs: {identical:?}; differing or failing: {broken:?}"),
    )
}
