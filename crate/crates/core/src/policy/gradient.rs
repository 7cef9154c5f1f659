//! Objective with importance ratios and entropy bonus, and its exact gradient.
//!
//! ```text
//! J = (1/N) Σ_j exp(logp_θ(f_j) - logp_old(f_j)) · A_j  +  β · H̄
//! ```
//!
//! `N` counts candidates across the whole batch and `H̄` is the per-step
//! conditional entropy averaged over every step of every candidate (or the
//! per-candidate sum averaged over candidates, see [`EntropyMode`]).
//! Old log-probabilities are constants. The backward pass is written out by
//! hand: masked softmax, dot-product scores, the selection-state recurrence,
//! the key/value heads and the token aggregator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::synthenv::Episode;

use super::params::PolicyParams;
use super::rollout::{aggregate_tokens, frame_embeddings, initial_state, replay};

/// How per-step entropies are pooled into the bonus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Mean over all steps of all candidates.
    #[default]
    Mean,
    /// Sum over the steps of a candidate, mean over candidates.
    Sum,
}

/// The candidates of one episode with their frozen statistics.
#[derive(Debug, Clone, Copy)]
pub struct GroupBatch<'a> {
    pub episode: &'a Episode,
    /// Subsets in selection order.
    pub subsets: &'a [Vec<usize>],
    /// `log π_old` of each subset.
    pub old_logps: &'a [f64],
    pub advantages: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub objective: f64,
    /// `∂J/∂θ`, one tensor per parameter.
    pub grads: PolicyParams,
    /// Mean per-step entropy across the batch.
    pub mean_entropy: f64,
    /// Largest `|logp_θ - logp_old|` over the batch.
    pub max_abs_log_ratio: f64,
}

struct Partial {
    objective: f64,
    grads: PolicyParams,
    entropy_sum: f64,
    max_abs_log_ratio: f64,
}

/// Evaluate `J` and its gradient with respect to every parameter.
pub fn objective_and_gradient(
    params: &PolicyParams,
    batch: &[GroupBatch<'_>],
    beta: f64,
    mode: EntropyMode,
) -> Result<ObjectiveOutput> {
    if batch.is_empty() {
        return Err(invalid_input("empty batch"));
    }
    let mut n_cand = 0usize;
    let mut n_steps = 0usize;
    for item in batch {
        let n = item.subsets.len();
        if n == 0 || item.old_logps.len() != n || item.advantages.len() != n {
            return Err(invalid_input(format!(
                "episode {}: {} subsets, {} old log-probs, {} advantages",
                item.episode.id,
                n,
                item.old_logps.len(),
                item.advantages.len()
            )));
        }
        n_cand += n;
        n_steps += item.subsets.iter().map(Vec::len).sum::<usize>();
    }
    if n_steps == 0 {
        return Err(invalid_input("subsets are empty"));
    }
    let w_pg = 1.0 / n_cand as f64;
    let w_h = match mode {
        EntropyMode::Mean => beta / n_steps as f64,
        EntropyMode::Sum => beta / n_cand as f64,
    };

    let partials: Vec<Partial> = batch
        .par_iter()
        .map(|item| episode_gradient(params, item, w_pg, w_h))
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    let mut objective = 0.0;
    let mut entropy_sum = 0.0;
    let mut max_abs_log_ratio: f64 = 0.0;
    for p in &partials {
        grads.axpy(1.0, &p.grads);
        objective += p.objective;
        entropy_sum += p.entropy_sum;
        max_abs_log_ratio = max_abs_log_ratio.max(p.max_abs_log_ratio);
    }
    if !objective.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "objective or gradient".into(),
        });
    }
    Ok(ObjectiveOutput {
        objective,
        grads,
        mean_entropy: entropy_sum / n_steps as f64,
        max_abs_log_ratio,
    })
}

fn one_minus_sq(g: &DVector<f64>) -> DVector<f64> {
    g.map(|x| 1.0 - x * x)
}

fn episode_gradient(params: &PolicyParams, item: &GroupBatch<'_>, w_pg: f64, w_h: f64) -> Result<Partial> {
    let ep = item.episode;
    let emb = frame_embeddings(params, ep)?;
    let t = ep.t;
    let d_model = params.w_k.nrows();
    let d_g = params.w_g.nrows();
    let inv_sqrt = 1.0 / (d_model as f64).sqrt();
    let score_scale = params.s * inv_sqrt;

    let mut grads = params.zeros_like();
    let mut dk = DMatrix::<f64>::zeros(t, d_model);
    let mut dv = DMatrix::<f64>::zeros(t, d_model);
    let mut objective = 0.0;
    let mut entropy_sum = 0.0;
    let mut max_abs_log_ratio: f64 = 0.0;
    let query = DVector::from_column_slice(&ep.query);
    let g0 = initial_state(params, &ep.query);

    for ((subset, &old), &adv) in item.subsets.iter().zip(item.old_logps).zip(item.advantages) {
        let r = replay(params, ep, &emb, subset, true)?;
        let log_ratio = r.step_logps.iter().sum::<f64>() - old;
        max_abs_log_ratio = max_abs_log_ratio.max(log_ratio.abs());
        let ratio = log_ratio.exp();
        let step_entropy: f64 = r.step_entropies.iter().sum();
        objective += w_pg * ratio * adv + w_h * step_entropy;
        entropy_sum += step_entropy;

        // ∂J/∂logp of this candidate.
        let c_lp = w_pg * ratio * adv;
        let steps = r.traces.len();
        let mut dg: Vec<DVector<f64>> = vec![DVector::zeros(d_g); steps];

        for i in (0..steps).rev() {
            let tr = &r.traces[i];
            let h = tr.dist.entropy;
            let mut dl = DVector::<f64>::zeros(t);
            for (k, (&p, &l)) in tr.dist.probs.iter().zip(&tr.dist.logits).enumerate() {
                if !l.is_finite() {
                    continue;
                }
                let log_p = l - tr.dist.log_norm;
                let mut d = -c_lp * p - w_h * p * (log_p + h);
                if k == tr.chosen {
                    d += c_lp;
                }
                dl[k] = d;
            }
            grads.s += dl.dot(&tr.raw) * inv_sqrt;
            let draw = dl * score_scale;
            dk.ger(1.0, &draw, &tr.qv, 1.0);
            let dqv = emb.k.tr_mul(&draw);
            grads.w_q.ger(1.0, &dqv, &tr.g, 1.0);
            dg[i].gemv_tr(1.0, &params.w_q, &dqv, 1.0);

            if i > 0 {
                // g_i = tanh(W_g g_{i-1} + W_u v_{f_{i-1}})
                let da = dg[i].component_mul(&one_minus_sq(&tr.g));
                let prev = &r.traces[i - 1];
                let v_prev = emb.v.row(prev.chosen).transpose();
                grads.w_g.ger(1.0, &da, &prev.g, 1.0);
                grads.w_u.ger(1.0, &da, &v_prev, 1.0);
                let dv_row = params.w_u.tr_mul(&da);
                let mut row = dv.row_mut(prev.chosen);
                row += dv_row.transpose();
                let (head, _) = dg.split_at_mut(i);
                head[i - 1].gemv_tr(1.0, &params.w_g, &da, 1.0);
            } else {
                // g_0 = tanh(W_c q + u0)
                let da = dg[0].component_mul(&one_minus_sq(&g0));
                grads.w_c.ger(1.0, &da, &query, 1.0);
                grads.u0 += &da;
            }
        }
    }

    // K = E W_kᵀ, V = E W_vᵀ + 1 b_vᵀ
    grads.w_k = dk.tr_mul(&emb.e);
    grads.w_v = dv.tr_mul(&emb.e);
    grads.b_v = dv.row_sum().transpose();
    let mut de = &dk * &params.w_k;
    de.gemm(1.0, &dv, &params.w_v, 1.0);

    for (tt, frame) in ep.frames.iter().enumerate() {
        let mut dh = de.row(tt).transpose();
        if dh.iter().all(|&x| x == 0.0) {
            continue;
        }
        let states = aggregate_tokens(params, frame);
        for l in (0..frame.len()).rev() {
            let da = dh.component_mul(&one_minus_sq(&states[l]));
            let x = DVector::from_column_slice(&frame[l]);
            grads.embed_in.ger(1.0, &da, &x, 1.0);
            if l == 0 {
                break;
            }
            grads.embed_rec.ger(1.0, &da, &states[l - 1], 1.0);
            dh = params.embed_rec.tr_mul(&da);
        }
    }

    Ok(Partial {
        objective,
        grads,
        entropy_sum,
        max_abs_log_ratio,
    })
}

/// `J` alone, by plain forward evaluation. Used as the finite-difference
/// reference for the gradient.
pub fn objective_value(
    params: &PolicyParams,
    batch: &[GroupBatch<'_>],
    beta: f64,
    mode: EntropyMode,
) -> Result<f64> {
    let n_cand: usize = batch.iter().map(|b| b.subsets.len()).sum();
    let n_steps: usize = batch.iter().flat_map(|b| b.subsets.iter().map(Vec::len)).sum();
    let mut pg = 0.0;
    let mut ent = 0.0;
    for item in batch {
        for ((subset, &old), &adv) in item.subsets.iter().zip(item.old_logps).zip(item.advantages) {
            let (logp, ents) = super::rollout::subset_logprob(params, item.episode, subset)?;
            pg += (logp - old).exp() * adv;
            ent += ents.iter().sum::<f64>();
        }
    }
    let bonus = match mode {
        EntropyMode::Mean => ent / n_steps as f64,
        EntropyMode::Sum => ent / n_cand as f64,
    };
    Ok(pg / n_cand as f64 + beta * bonus)
}
