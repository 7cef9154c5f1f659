use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::rng;
use crate::synthenv::Episode;

use super::params::PolicyParams;

/// Per-frame embeddings, keys and values of one episode.
#[derive(Debug, Clone)]
pub struct FrameEmbeddings {
    /// `T x d_e`; row `t` is the aggregator's last hidden state over frame `t`.
    pub e: DMatrix<f64>,
    /// `T x d_model` keys.
    pub k: DMatrix<f64>,
    /// `T x d_model` values.
    pub v: DMatrix<f64>,
}

impl FrameEmbeddings {
    pub fn num_frames(&self) -> usize {
        self.e.nrows()
    }
}

/// Hidden states `h_1..h_L` of `h_l = tanh(A x_l + B h_{l-1})`, `h_0 = 0`.
pub fn aggregate_tokens(params: &PolicyParams, tokens: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let d_e = params.embed_in.nrows();
    let mut h = DVector::zeros(d_e);
    let mut states = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let x = DVector::from_column_slice(tok);
        let mut a = &params.embed_in * x;
        a.gemv(1.0, &params.embed_rec, &h, 1.0);
        h = a.map(f64::tanh);
        states.push(h.clone());
    }
    states
}

fn check_episode(params: &PolicyParams, ep: &Episode) -> Result<()> {
    let dims = params.dims();
    if ep.d_in != dims.d_in {
        return Err(invalid_input(format!(
            "episode {} has d_in {} but the policy expects {}",
            ep.id, ep.d_in, dims.d_in
        )));
    }
    if ep.query.len() != dims.d_q {
        return Err(invalid_input(format!(
            "episode {} has d_q {} but the policy expects {}",
            ep.id,
            ep.query.len(),
            dims.d_q
        )));
    }
    Ok(())
}

/// Last-token frame embeddings plus key and value projections.
pub fn frame_embeddings(params: &PolicyParams, ep: &Episode) -> Result<FrameEmbeddings> {
    check_episode(params, ep)?;
    let d_e = params.embed_in.nrows();
    let mut e = DMatrix::zeros(ep.t, d_e);
    for (t, frame) in ep.frames.iter().enumerate() {
        let states = aggregate_tokens(params, frame);
        let last = states.last().expect("L >= 1");
        e.row_mut(t).copy_from(&last.transpose());
    }
    let k = &e * params.w_k.transpose();
    let mut v = &e * params.w_v.transpose();
    for mut row in v.row_iter_mut() {
        row += params.b_v.transpose();
    }
    Ok(FrameEmbeddings { e, k, v })
}

/// A categorical distribution over the frames still available at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    /// Probability per frame; exactly 0 for masked frames.
    pub probs: Vec<f64>,
    /// Scaled logits; `-inf` for masked frames.
    pub logits: Vec<f64>,
    /// `log Σ exp(logits)` over available frames.
    pub log_norm: f64,
    pub entropy: f64,
    /// Number of unmasked frames.
    pub available: usize,
}

impl StepDistribution {
    /// Masked softmax of `logits` where `mask[t]` marks frames already taken.
    pub fn from_logits(mut logits: Vec<f64>, mask: &[bool]) -> Result<Self> {
        if logits.len() != mask.len() {
            return Err(invalid_input("mask length differs from frame count"));
        }
        let available = mask.iter().filter(|&&m| !m).count();
        if available == 0 {
            return Err(invalid_input("every frame is masked"));
        }
        for (l, &m) in logits.iter_mut().zip(mask) {
            if m {
                *l = f64::NEG_INFINITY;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(crate::Error::NonFinite {
                context: "selection logits".into(),
            });
        }
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let log_norm = max + total.ln();
        let entropy = log_norm
            - probs
                .iter()
                .zip(&logits)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, l)| p * l)
                .sum::<f64>();
        Ok(Self {
            probs,
            logits,
            log_norm,
            entropy,
            available,
        })
    }

    pub fn log_prob(&self, t: usize) -> f64 {
        self.logits[t] - self.log_norm
    }

    /// `KL(π || uniform over available frames)`, computed directly.
    pub fn kl_to_uniform(&self) -> f64 {
        let n = self.available as f64;
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(t, p)| p * (self.log_prob(t) + n.ln()))
            .sum()
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (t, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = t;
                if u < acc {
                    return t;
                }
            }
        }
        last
    }
}

/// Unscaled dot-product scores `K q` and the scaled distribution.
pub(crate) fn scores_and_distribution(
    params: &PolicyParams,
    keys: &DMatrix<f64>,
    qv: &DVector<f64>,
    mask: &[bool],
) -> Result<(DVector<f64>, StepDistribution)> {
    let raw = keys * qv;
    let scale = params.s / (params.w_k.nrows() as f64).sqrt();
    let logits: Vec<f64> = raw.iter().map(|r| r * scale).collect();
    Ok((raw, StepDistribution::from_logits(logits, mask)?))
}

/// Distribution of the next pick given state `g` and the taken-frame mask.
pub fn step_distribution(
    params: &PolicyParams,
    keys: &DMatrix<f64>,
    g: &DVector<f64>,
    mask: &[bool],
) -> Result<StepDistribution> {
    let qv = &params.w_q * g;
    Ok(scores_and_distribution(params, keys, &qv, mask)?.1)
}

/// Initial selection state `tanh(W_c q + u0)`.
pub fn initial_state(params: &PolicyParams, query: &[f64]) -> DVector<f64> {
    let q = DVector::from_column_slice(query);
    let mut a = &params.w_c * q;
    a += &params.u0;
    a.map(f64::tanh)
}

/// State after picking a frame with value `value`.
pub fn next_state(params: &PolicyParams, g: &DVector<f64>, value: &DVector<f64>) -> DVector<f64> {
    let mut a = &params.w_g * g;
    a.gemv(1.0, &params.w_u, value, 1.0);
    a.map(f64::tanh)
}

/// One sampled action: the ordered picks with per-step statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSubset {
    /// Picks in selection order.
    pub indices: Vec<usize>,
    /// The same frames in temporal order.
    pub time_sorted: Vec<usize>,
    pub step_logps: Vec<f64>,
    pub step_entropies: Vec<f64>,
}

impl CandidateSubset {
    /// `log π(subset)` in selection order.
    pub fn logp(&self) -> f64 {
        self.step_logps.iter().sum()
    }
}

/// Internal record of one step, kept for the backward pass.
pub(crate) struct StepTrace {
    pub g: DVector<f64>,
    pub qv: DVector<f64>,
    pub raw: DVector<f64>,
    pub dist: StepDistribution,
    pub chosen: usize,
}

pub(crate) struct Rollout {
    pub indices: Vec<usize>,
    pub step_logps: Vec<f64>,
    pub step_entropies: Vec<f64>,
    pub traces: Vec<StepTrace>,
}

/// Run `steps` selection steps; `choose` picks the frame at each step.
pub(crate) fn rollout(
    params: &PolicyParams,
    emb: &FrameEmbeddings,
    query: &[f64],
    steps: usize,
    keep_traces: bool,
    mut choose: impl FnMut(usize, &StepDistribution) -> Result<usize>,
) -> Result<Rollout> {
    let t = emb.num_frames();
    if steps > t {
        return Err(invalid_input(format!("cannot select {steps} of {t} frames")));
    }
    let mut mask = vec![false; t];
    let mut g = initial_state(params, query);
    let mut out = Rollout {
        indices: Vec::with_capacity(steps),
        step_logps: Vec::with_capacity(steps),
        step_entropies: Vec::with_capacity(steps),
        traces: Vec::new(),
    };
    for i in 0..steps {
        let qv = &params.w_q * &g;
        let (raw, dist) = scores_and_distribution(params, &emb.k, &qv, &mask)?;
        let f = choose(i, &dist)?;
        if f >= t || mask[f] {
            return Err(invalid_input(format!("frame {f} is out of range or already selected")));
        }
        out.indices.push(f);
        out.step_logps.push(dist.log_prob(f));
        out.step_entropies.push(dist.entropy);
        mask[f] = true;
        let g_next = if i + 1 < steps {
            Some(next_state(params, &g, &emb.v.row(f).transpose()))
        } else {
            None
        };
        if keep_traces {
            out.traces.push(StepTrace {
                g,
                qv,
                raw,
                dist,
                chosen: f,
            });
        }
        match g_next {
            Some(n) => g = n,
            None => break,
        }
    }
    Ok(out)
}

fn to_candidate(r: Rollout) -> CandidateSubset {
    let mut time_sorted = r.indices.clone();
    time_sorted.sort_unstable();
    CandidateSubset {
        indices: r.indices,
        time_sorted,
        step_logps: r.step_logps,
        step_entropies: r.step_entropies,
    }
}

/// RNG stream of candidate `j` of episode `episode_id` under `seed`.
pub fn candidate_rng(seed: u64, episode_id: &str, j: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream("candidate", &[seed.into(), episode_id.into(), j.into()])
}

/// Sample `n` subsets of `t_prime` distinct frames.
pub fn sample_subsets(
    params: &PolicyParams,
    ep: &Episode,
    t_prime: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<CandidateSubset>> {
    let emb = frame_embeddings(params, ep)?;
    sample_with_embeddings(params, ep, &emb, t_prime, n, seed)
}

pub(crate) fn sample_with_embeddings(
    params: &PolicyParams,
    ep: &Episode,
    emb: &FrameEmbeddings,
    t_prime: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<CandidateSubset>> {
    if t_prime == 0 || t_prime > ep.t {
        return Err(invalid_input(format!("T'={t_prime} must lie in [1, T={}]", ep.t)));
    }
    if n == 0 {
        return Err(invalid_input("need at least one candidate"));
    }
    (0..n)
        .map(|j| {
            let mut rng = candidate_rng(seed, &ep.id, j);
            let r = rollout(params, emb, &ep.query, t_prime, false, |_, d| Ok(d.sample(&mut rng)))?;
            Ok(to_candidate(r))
        })
        .collect()
}

/// Replay `subset` in its selection order: `(log π(subset), per-step entropies)`.
pub fn subset_logprob(params: &PolicyParams, ep: &Episode, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
    let emb = frame_embeddings(params, ep)?;
    let r = replay(params, ep, &emb, subset, false)?;
    Ok((r.step_logps.iter().sum(), r.step_entropies))
}

pub(crate) fn replay(
    params: &PolicyParams,
    ep: &Episode,
    emb: &FrameEmbeddings,
    subset: &[usize],
    keep_traces: bool,
) -> Result<Rollout> {
    crate::synthenv::sorted_subset(subset, ep.t)?;
    rollout(params, emb, &ep.query, subset.len(), keep_traces, |i, _| Ok(subset[i]))
}

/// Sample a single candidate and hand every step distribution to `visit`.
pub fn sample_visiting(
    params: &PolicyParams,
    ep: &Episode,
    emb: &FrameEmbeddings,
    t_prime: usize,
    rng: &mut impl Rng,
    mut visit: impl FnMut(&StepDistribution),
) -> Result<Vec<usize>> {
    let r = rollout(params, emb, &ep.query, t_prime, false, |_, d| {
        visit(d);
        Ok(d.sample(rng))
    })?;
    Ok(r.indices)
}
