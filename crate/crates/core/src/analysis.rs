//! Behavioural analysis of a trained selector.
//!
//! - selection PDFs: step distributions averaged over steps, then over runs
//! - JS / symmetric KL / 1-Wasserstein distances and their pairwise means
//! - Kozachenko–Leonenko entropy of 1-D samples
//! - needle-mass sweeps over episode length and needle position
//! - answer accuracy when subsets are drawn from likelihood-ranked frame bins

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{invalid_input, Error, Result};
use crate::policy::rollout::{candidate_rng, sample_visiting};
use crate::policy::{frame_embeddings, PolicyParams};
use crate::rng;
use crate::synthenv::{Episode, Oracle};

/// Weight of the uniform distribution mixed in before KL terms.
pub const SMOOTHING_LAMBDA: f64 = 1e-6;
/// Offset separating tied samples in [`kl_entropy`].
pub const TIE_JITTER: f64 = 1e-9;

/// Per-frame selection probability of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPdf {
    pub episode_id: String,
    pub n_runs: usize,
    pub p: Vec<f64>,
}

/// Average the full step distributions of `n_runs` sampled selections.
pub fn estimate_selection_pdf(
    params: &PolicyParams,
    episode: &Episode,
    t_prime: usize,
    n_runs: usize,
    seed: u64,
) -> Result<SelectionPdf> {
    if n_runs == 0 {
        return Err(invalid_input("n_runs must be >= 1"));
    }
    if t_prime == 0 || t_prime > episode.t {
        return Err(invalid_input(format!("T'={t_prime} must lie in [1, T={}]", episode.t)));
    }
    let emb = frame_embeddings(params, episode)?;
    let mut p = vec![0.0; episode.t];
    for j in 0..n_runs {
        let mut run = vec![0.0; episode.t];
        let mut r = candidate_rng(seed, &episode.id, j);
        sample_visiting(params, episode, &emb, t_prime, &mut r, |d| {
            for (acc, &pi) in run.iter_mut().zip(&d.probs) {
                *acc += pi;
            }
        })?;
        for (acc, x) in p.iter_mut().zip(run) {
            *acc += x / t_prime as f64;
        }
    }
    p.iter_mut().for_each(|x| *x /= n_runs as f64);
    Ok(SelectionPdf {
        episode_id: episode.id.clone(),
        n_runs,
        p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    /// Jensen–Shannon divergence in nats, on the raw distributions.
    pub js: f64,
    /// `KL(p‖q) + KL(q‖p)` in nats after mixing each side with uniform.
    pub sym_kl: f64,
    /// Earth mover's distance with unit frame spacing.
    pub w1: f64,
}

fn check_pdf(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(invalid_input("empty distribution"));
    }
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(invalid_input("distribution entries must be finite and >= 0"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid_input(format!("distribution sums to {total}")));
    }
    Ok(())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let u = 1.0 / p.len() as f64;
    p.iter().map(|x| (1.0 - SMOOTHING_LAMBDA) * x + SMOOTHING_LAMBDA * u).collect()
}

pub fn distribution_distances(p: &[f64], q: &[f64]) -> Result<Distances> {
    if p.len() != q.len() {
        return Err(invalid_input(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    check_pdf(p)?;
    check_pdf(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0);
    let (ps, qs) = (smooth(p), smooth(q));
    let sym_kl = (kl(&ps, &qs) + kl(&qs, &ps)).max(0.0);
    let mut cdf_gap = 0.0;
    let mut w1 = 0.0;
    for (a, b) in p.iter().zip(q) {
        cdf_gap += a - b;
        w1 += f64::abs(cdf_gap);
    }
    Ok(Distances { js, sym_kl, w1 })
}

/// Mean of each distance over all unordered pairs.
pub fn pairwise_diversity(pdfs: &[Vec<f64>]) -> Result<Distances> {
    if pdfs.len() < 2 {
        return Err(invalid_input("need at least 2 distributions"));
    }
    let pairs: Vec<(usize, usize)> = (0..pdfs.len())
        .flat_map(|i| (i + 1..pdfs.len()).map(move |j| (i, j)))
        .collect();
    let dists: Vec<Distances> = pairs
        .par_iter()
        .map(|&(i, j)| distribution_distances(&pdfs[i], &pdfs[j]))
        .collect::<Result<_>>()?;
    let n = dists.len() as f64;
    let mut mean = Distances { js: 0.0, sym_kl: 0.0, w1: 0.0 };
    for d in &dists {
        mean.js += d.js / n;
        mean.sym_kl += d.sym_kl / n;
        mean.w1 += d.w1 / n;
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Differential entropy in nats.
    pub entropy: f64,
    /// Samples shifted by a multiple of [`TIE_JITTER`] to break exact ties.
    pub jittered: usize,
}

/// Kozachenko–Leonenko differential entropy of 1-D samples with the `k`-th
/// nearest neighbour.
pub fn kl_entropy(samples: &[f64], k: usize) -> Result<EntropyEstimate> {
    let n = samples.len();
    if k == 0 || n <= k {
        return Err(invalid_input(format!("need n > k >= 1, got n={n}, k={k}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(invalid_input("non-finite sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut xs = sorted.clone();
    let mut jittered = 0;
    let mut run = 0usize;
    for i in 1..n {
        if sorted[i] == sorted[i - 1] {
            run += 1;
            xs[i] += run as f64 * TIE_JITTER;
            jittered += 1;
        } else {
            run = 0;
        }
    }
    xs.sort_by(f64::total_cmp);

    let mut log_sum = 0.0;
    for i in 0..n {
        // Merge outward from i until k neighbours are taken.
        let (mut lo, mut hi) = (i, i);
        let mut eps = 0.0;
        for _ in 0..k {
            let left = (lo > 0).then(|| xs[i] - xs[lo - 1]);
            let right = (hi + 1 < n).then(|| xs[hi + 1] - xs[i]);
            eps = match (left, right) {
                (Some(l), Some(r)) if l <= r => {
                    lo -= 1;
                    l
                }
                (Some(l), None) => {
                    lo -= 1;
                    l
                }
                (_, Some(r)) => {
                    hi += 1;
                    r
                }
                (None, None) => unreachable!("n > k"),
            };
        }
        if eps <= 0.0 {
            return Err(Error::NonFinite {
                context: "zero nearest-neighbour distance".into(),
            });
        }
        log_sum += eps.ln();
    }
    let entropy = digamma(n as f64) - digamma(k as f64) + std::f64::consts::LN_2 + log_sum / n as f64;
    Ok(EntropyEstimate { entropy, jittered })
}

/// Mean k-NN entropy of the selected frame times of `n_runs` sampled
/// subsets, with times scaled to `[0, 1)` by `T`.
pub fn selection_time_entropy(
    params: &PolicyParams,
    episode: &Episode,
    t_prime: usize,
    n_runs: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if n_runs == 0 {
        return Err(invalid_input("n_runs must be >= 1"));
    }
    let subsets = crate::policy::sample_subsets(params, episode, t_prime, n_runs, seed)?;
    let mut total = 0.0;
    for c in &subsets {
        let times: Vec<f64> = c.time_sorted.iter().map(|&f| f as f64 / episode.t as f64).collect();
        total += kl_entropy(&times, k)?.entropy;
    }
    Ok(total / n_runs as f64)
}

/// Needle frame for a relative position in `[0, 1]`.
pub fn needle_index(t: usize, position: f64) -> usize {
    ((position.clamp(0.0, 1.0) * (t - 1) as f64).round() as usize).min(t - 1)
}

/// Needle mass over episode lengths (rows) and needle positions (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahGrid {
    pub frame_counts: Vec<usize>,
    pub positions: Vec<f64>,
    /// `cells[r][c]` for `frame_counts[r]` and `positions[c]`.
    pub cells: Vec<Vec<f64>>,
}

impl NiahGrid {
    /// The grid a uniform selector would produce: `1/T` in every cell.
    pub fn uniform(frame_counts: &[usize], positions: &[f64]) -> Self {
        Self {
            frame_counts: frame_counts.to_vec(),
            positions: positions.to_vec(),
            cells: frame_counts
                .iter()
                .map(|&t| vec![1.0 / t as f64; positions.len()])
                .collect(),
        }
    }

    /// Cell-wise ratio `self / baseline`.
    pub fn ratio_to(&self, baseline: &NiahGrid) -> Result<NiahGrid> {
        if self.frame_counts != baseline.frame_counts || self.positions != baseline.positions {
            return Err(invalid_input("grids have different axes"));
        }
        let cells = self
            .cells
            .iter()
            .zip(&baseline.cells)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x / y).collect())
            .collect();
        Ok(NiahGrid {
            frame_counts: self.frame_counts.clone(),
            positions: self.positions.clone(),
            cells,
        })
    }

    /// Fraction of cells with value at least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        let all: Vec<f64> = self.cells.iter().flatten().copied().collect();
        all.iter().filter(|&&c| c >= threshold).count() as f64 / all.len() as f64
    }
}

/// Options shared by the needle sweep and the bin evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub t_prime: usize,
    pub n_runs: usize,
    pub seed: u64,
}

/// Selection-PDF mass on the needle for single-needle episodes built by
/// `make_episode(T, needle_index)`.
pub fn vniah_sweep<F>(
    params: &PolicyParams,
    make_episode: F,
    frame_counts: &[usize],
    positions: &[f64],
    opts: SamplingOptions,
) -> Result<NiahGrid>
where
    F: Fn(usize, usize) -> Result<Episode> + Sync,
{
    if frame_counts.is_empty() || positions.is_empty() {
        return Err(invalid_input("sweep axes must be non-empty"));
    }
    if frame_counts.iter().any(|&t| t < opts.t_prime.max(1)) {
        return Err(invalid_input("every frame count must be >= T'"));
    }
    let coords: Vec<(usize, usize)> = (0..frame_counts.len())
        .flat_map(|r| (0..positions.len()).map(move |c| (r, c)))
        .collect();
    let masses: Vec<f64> = coords
        .par_iter()
        .map(|&(r, c)| {
            let t = frame_counts[r];
            let needle = needle_index(t, positions[c]);
            let ep = make_episode(t, needle)?;
            if ep.needle_set != [needle] {
                return Err(invalid_input(format!("episode {} is not a single-needle episode at {needle}", ep.id)));
            }
            let pdf = estimate_selection_pdf(params, &ep, opts.t_prime, opts.n_runs, opts.seed)?;
            Ok(pdf.p[needle])
        })
        .collect::<Result<_>>()?;
    let cells = masses.chunks(positions.len()).map(<[f64]>::to_vec).collect();
    Ok(NiahGrid {
        frame_counts: frame_counts.to_vec(),
        positions: positions.to_vec(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinSide {
    /// The most likely `k%` of frames.
    Over,
    /// The least likely `k%` of frames.
    Under,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub k: u32,
    pub side: BinSide,
    pub accuracy: f64,
    /// Episodes whose bin had fewer than `T'` frames and was used whole.
    pub exhausted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub rows: Vec<BinRow>,
    /// Accuracy of subsets drawn from all frames.
    pub baseline: f64,
    pub subsets_per_bin: usize,
    pub episodes: usize,
}

impl BinTable {
    pub fn accuracy(&self, k: u32, side: BinSide) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k && r.side == side).map(|r| r.accuracy)
    }
}

/// Frame indices ordered from most to least likely (ties by index).
pub fn rank_frames(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

/// Frames in the `k%` bin on `side`; at least one frame.
pub fn bin_frames(ranked: &[usize], k: u32, side: BinSide) -> Vec<usize> {
    let t = ranked.len();
    let size = ((k as f64 / 100.0 * t as f64).round() as usize).clamp(1, t);
    let mut frames = match side {
        BinSide::Over => ranked[..size].to_vec(),
        BinSide::Under => ranked[t - size..].to_vec(),
    };
    frames.sort_unstable();
    frames
}

/// True when the correct option strictly beats every other option.
fn strictly_correct(z: &[f64], correct: usize) -> bool {
    z.iter().enumerate().all(|(i, &v)| i == correct || z[correct] > v)
}

/// Accuracy of `count` subsets of up to `t_prime` frames drawn from `pool`.
fn pool_accuracy(
    ep: &Episode,
    oracle: &dyn Oracle,
    pool: &[usize],
    t_prime: usize,
    count: usize,
    key: (&str, u64, u64),
) -> Result<(f64, bool)> {
    let exhausted = pool.len() < t_prime;
    let mut hits = 0usize;
    for j in 0..count {
        let subset: Vec<usize> = if exhausted || pool.len() == t_prime {
            pool.to_vec()
        } else {
            let mut r = rng::stream(
                "bin-subset",
                &[key.1.into(), ep.id.as_str().into(), key.0.into(), key.2.into(), j.into()],
            );
            let mut s: Vec<usize> = index::sample(&mut r, pool.len(), t_prime)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            s.sort_unstable();
            s
        };
        let z = oracle.logits(ep, &subset).map_err(|e| Error::Scoring {
            episode: ep.id.clone(),
            source: Box::new(e),
        })?;
        if strictly_correct(z.as_slice(), ep.correct) {
            hits += 1;
        }
    }
    Ok((hits as f64 / count as f64, exhausted))
}

/// Answer accuracy when subsets come from likelihood-ranked frame bins.
pub fn likelihood_bins_eval(
    params: &PolicyParams,
    episodes: &[Episode],
    oracle: &dyn Oracle,
    ks: &[u32],
    subsets_per_bin: usize,
    opts: SamplingOptions,
) -> Result<BinTable> {
    if episodes.is_empty() {
        return Err(invalid_input("no episodes to evaluate"));
    }
    if subsets_per_bin == 0 {
        return Err(invalid_input("subsets_per_bin must be >= 1"));
    }
    if let Some(k) = ks.iter().find(|&&k| k == 0 || k > 100) {
        return Err(invalid_input(format!("bin percentage {k} outside [1, 100]")));
    }
    let cells: Vec<(u32, BinSide)> = ks
        .iter()
        .flat_map(|&k| [(k, BinSide::Over), (k, BinSide::Under)])
        .collect();
    let per_episode: Vec<(f64, Vec<(f64, bool)>)> = episodes
        .par_iter()
        .map(|ep| {
            let pdf = estimate_selection_pdf(params, ep, opts.t_prime, opts.n_runs, opts.seed)?;
            let ranked = rank_frames(&pdf.p);
            let all: Vec<usize> = (0..ep.t).collect();
            let (base, _) = pool_accuracy(ep, oracle, &all, opts.t_prime, subsets_per_bin, ("all", opts.seed, 0))?;
            let bins = cells
                .iter()
                .map(|&(k, side)| {
                    let pool = bin_frames(&ranked, k, side);
                    let tag = match side {
                        BinSide::Over => "over",
                        BinSide::Under => "under",
                    };
                    pool_accuracy(ep, oracle, &pool, opts.t_prime, subsets_per_bin, (tag, opts.seed, k as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((base, bins))
        })
        .collect::<Result<_>>()?;
    let n = episodes.len() as f64;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(k, side))| BinRow {
            k,
            side,
            accuracy: per_episode.iter().map(|(_, b)| b[c].0).sum::<f64>() / n,
            exhausted: per_episode.iter().filter(|(_, b)| b[c].1).count(),
        })
        .collect();
    Ok(BinTable {
        rows,
        baseline: per_episode.iter().map(|(b, _)| b).sum::<f64>() / n,
        subsets_per_bin,
        episodes: episodes.len(),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

/// `frames,position,value` rows.
pub fn write_grid_csv(path: &Path, grid: &NiahGrid) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["frames", "position", "value"])?;
    for (t, row) in grid.frame_counts.iter().zip(&grid.cells) {
        for (pos, v) in grid.positions.iter().zip(row) {
            w.write_record([t.to_string(), pos.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `k,side,accuracy,exhausted` rows.
pub fn write_bins_csv(path: &Path, table: &BinTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["k", "side", "accuracy", "exhausted"])?;
    for r in &table.rows {
        let side = match r.side {
            BinSide::Over => "over",
            BinSide::Under => "under",
        };
        w.write_record([r.k.to_string(), side.into(), r.accuracy.to_string(), r.exhausted.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `frame p` rows, one block per pdf separated by blank lines.
pub fn pdf_plot_data(pdfs: &[SelectionPdf]) -> String {
    let mut out = String::new();
    for pdf in pdfs {
        out.push_str(&format!("# {}\n", pdf.episode_id));
        for (t, p) in pdf.p.iter().enumerate() {
            out.push_str(&format!("{t} {p}\n"));
        }
        out.push_str("\n\n");
    }
    out
}

/// `frames position value` rows with a blank line between frame counts.
pub fn grid_plot_data(grid: &NiahGrid) -> String {
    let mut out = String::from("# frames position value\n");
    for (t, row) in grid.frame_counts.iter().zip(&grid.cells) {
        for (pos, v) in grid.positions.iter().zip(row) {
            out.push_str(&format!("{t} {pos} {v}\n"));
        }
        out.push('\n');
    }
    out
}

/// `k over under` rows.
pub fn bins_plot_data(table: &BinTable, ks: &[u32]) -> String {
    let mut out = String::from("# k over under\n");
    for &k in ks {
        let over = table.accuracy(k, BinSide::Over).unwrap_or(f64::NAN);
        let under = table.accuracy(k, BinSide::Under).unwrap_or(f64::NAN);
        out.push_str(&format!("{k} {over} {under}\n"));
    }
    out
}
