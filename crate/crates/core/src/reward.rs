//! Margin reward, group-relative advantages and reward variance.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::synthenv::OptionLogits;

/// Default stabiliser added to the group standard deviation.
pub const DEFAULT_ADV_EPS: f64 = 1e-6;

/// Reward of one candidate subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub logits: OptionLogits,
    /// Normalised confidence gap, in [-1, 1].
    pub margin: f64,
    /// Highest-scoring wrong option (lowest index on ties).
    pub hardest_negative: usize,
}

fn check_logits(logits: &OptionLogits, correct: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(invalid_input(format!("need at least 2 options, got {}", logits.len())));
    }
    if correct >= logits.len() {
        return Err(invalid_input(format!("correct index {correct} out of range")));
    }
    if logits.as_slice().iter().any(|z| !z.is_finite()) {
        return Err(invalid_input("non-finite option logit"));
    }
    Ok(())
}

fn hardest_negative(z: &[f64], correct: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &zi) in z.iter().enumerate() {
        if i == correct {
            continue;
        }
        if best == usize::MAX || zi > z[best] {
            best = i;
        }
    }
    best
}

/// Margin reward `tanh((z[y*] - z[ŷ]) / 2)` where ŷ is the hardest negative.
pub fn margin_reward(logits: &OptionLogits, correct: usize) -> Result<RewardRecord> {
    check_logits(logits, correct)?;
    let z = logits.as_slice();
    let neg = hardest_negative(z, correct);
    Ok(RewardRecord {
        logits: logits.clone(),
        margin: ((z[correct] - z[neg]) / 2.0).tanh(),
        hardest_negative: neg,
    })
}

/// The same margin computed the long way: softmax confidences over all
/// options, then `(p* - p̂) / (p* + p̂)`.
pub fn confidence_ratio_margin(logits: &OptionLogits, correct: usize) -> Result<f64> {
    check_logits(logits, correct)?;
    let z = logits.as_slice();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|zi| (zi - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let neg = (0..z.len())
        .filter(|&i| i != correct)
        .fold(None::<usize>, |best, i| match best {
            Some(b) if probs[b] >= probs[i] => Some(b),
            _ => Some(i),
        })
        .expect("at least one negative");
    Ok((probs[correct] - probs[neg]) / (probs[correct] + probs[neg]))
}

/// Rewards of one candidate group and their normalised advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub eps: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64
}

/// `(r - mean(r)) / (std(r) + eps)` with population std. A constant group
/// yields exact zeros.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<AdvantageGroup> {
    if rewards.len() < 2 {
        return Err(invalid_input(format!("group needs >= 2 rewards, got {}", rewards.len())));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid_input("eps must be > 0"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(invalid_input("non-finite reward"));
    }
    let constant = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = if constant {
        vec![0.0; rewards.len()]
    } else {
        let mu = mean(rewards);
        let sd = population_variance(rewards).sqrt();
        rewards.iter().map(|r| (r - mu) / (sd + eps)).collect()
    };
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        eps,
    })
}

/// Population variance of a set of margins.
pub fn reward_variance(margins: &[f64]) -> Result<f64> {
    if margins.len() < 2 {
        return Err(invalid_input(format!("need >= 2 margins, got {}", margins.len())));
    }
    Ok(population_variance(margins))
}
