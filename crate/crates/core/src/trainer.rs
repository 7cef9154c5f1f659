//! Group-relative policy optimisation of the selection scorer.
//!
//! Each outer step draws a minibatch of episodes, freezes a copy of the
//! parameters, samples `N` candidate subsets per episode from the frozen copy,
//! scores them with the oracle, standardises the margins within each episode
//! into advantages, and then runs `K` AdamW updates on the importance-weighted
//! objective with an entropy bonus.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::policy::checkpoint::{self, Dtype};
use crate::policy::params::{is_backbone, skips_weight_decay};
use crate::policy::{objective_and_gradient, sample_subsets, EntropyMode, GroupBatch, PolicyDims, PolicyParams};
use crate::reward::{group_advantages, margin_reward};
use crate::rng;
use crate::synthenv::{Episode, Oracle};

/// What the inner updates after the first one optimise against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InnerMode {
    /// Keep the candidates, advantages and old log-probs of the outer step.
    #[default]
    Reuse,
    /// Draw and score a fresh candidate group before every inner update.
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Candidate subsets per episode.
    #[serde(rename = "N")]
    pub n: usize,
    /// Frames per subset.
    pub t_prime: usize,
    /// Optimizer updates per outer step.
    #[serde(rename = "K")]
    pub k: usize,
    pub inner_mode: InnerMode,
    /// Entropy bonus coefficient.
    pub beta: f64,
    pub entropy_mode: EntropyMode,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Episodes per outer step.
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub eps_adv: f64,
    /// Checkpoint period in outer steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub dims: PolicyDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 16,
            t_prime: 8,
            k: 1,
            inner_mode: InnerMode::Reuse,
            beta: 0.002,
            entropy_mode: EntropyMode::Mean,
            lr_backbone: 1e-5,
            lr_heads: 1e-4,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 192,
            total_steps: 2000,
            seed: 0,
            eps_adv: crate::reward::DEFAULT_ADV_EPS,
            checkpoint_every: 0,
            dims: PolicyDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid_config(format!("{name} must be > 0, got {v}")))
            }
        };
        if self.n < 2 {
            return Err(invalid_config(format!("N must be >= 2, got {}", self.n)));
        }
        if self.k < 1 {
            return Err(invalid_config("K must be >= 1"));
        }
        if self.t_prime < 1 {
            return Err(invalid_config("t_prime must be >= 1"));
        }
        if self.batch_size < 1 || self.total_steps < 1 {
            return Err(invalid_config("batch_size and total_steps must be >= 1"));
        }
        positive("lr_backbone", self.lr_backbone)?;
        positive("lr_heads", self.lr_heads)?;
        positive("grad_clip", self.grad_clip)?;
        positive("adam_eps", self.adam_eps)?;
        positive("eps_adv", self.eps_adv)?;
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(invalid_config("warmup_ratio must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid_config("weight_decay must be >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid_config("beta must be >= 0"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid_config(format!("{name} must lie in [0, 1)")));
            }
        }
        self.dims.validate()
    }

    /// Total optimizer updates over the run.
    pub fn total_updates(&self) -> usize {
        self.total_steps * self.k
    }
}

/// Multiplier on the base learning rates at optimizer update `update`.
///
/// Linear warmup from 0 over `ceil(warmup_ratio * total)` updates, then linear
/// decay to 0 at `total`.
pub fn lr_factor(update: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if update < warmup {
        update as f64 / warmup as f64
    } else if update >= total {
        0.0
    } else {
        (total - update) as f64 / (total - warmup) as f64
    }
}

/// AdamW moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: PolicyParams,
    pub v: PolicyParams,
    /// Updates applied so far.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// What one optimizer update did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr_heads: f64,
    pub lr_backbone: f64,
}

/// One AdamW update that *descends* along `grads`.
///
/// Clips `grads` to global norm `cfg.grad_clip`, updates the moments, applies
/// decoupled weight decay (except on biases, the start embedding and the logit
/// scale) and the bias-corrected Adam step. `update` indexes the schedule.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut PolicyParams,
    grads: &PolicyParams,
    update: usize,
    cfg: &TrainConfig,
) -> Result<UpdateInfo> {
    if params.shapes() != grads.shapes() || params.shapes() != state.m.shapes() {
        return Err(invalid_input("gradient shapes do not match the parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient".into(),
        });
    }
    let grad_norm = grads.global_norm();
    let clip_scale = if grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };
    let factor = lr_factor(update, cfg.total_updates(), cfg.warmup_ratio);
    let info = UpdateInfo {
        grad_norm,
        clip_scale,
        lr_heads: cfg.lr_heads * factor,
        lr_backbone: cfg.lr_backbone * factor,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);

    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut());
    for ((((name, p), (_, g)), (_, m)), (_, v)) in blocks {
        let lr = if is_backbone(name) { info.lr_backbone } else { info.lr_heads };
        let decay = if skips_weight_decay(name) {
            1.0
        } else {
            1.0 - lr * cfg.weight_decay
        };
        for i in 0..p.len() {
            let gi = g[i] * clip_scale;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            context: "parameters after update".into(),
        });
    }
    Ok(info)
}

/// Metrics of one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean margin over every candidate of the batch.
    pub mean_reward: f64,
    /// Mean per-step selection entropy under the frozen policy.
    pub mean_entropy: f64,
    /// Pre-clip gradient norm of the last inner update.
    pub grad_norm: f64,
    /// Head learning rate of the last inner update.
    pub lr: f64,
    /// Mean fraction of needles covered by a candidate.
    pub needle_recall: f64,
    /// Objective value at the last inner update.
    pub objective: f64,
    /// Largest `|log π_θ - log π_old|` seen during the inner updates.
    pub max_log_ratio: f64,
    /// Episodes whose candidates all earned the same reward.
    pub flat_groups: usize,
}

/// Record written when training aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub step: usize,
    pub inner_update: usize,
    pub error: String,
    pub param_norm: f64,
}

/// Receiver of per-step records.
pub trait MetricsSink {
    fn record(&mut self, metrics: &StepMetrics) -> Result<()>;
    fn abort(&mut self, record: &AbortRecord) -> Result<()>;
}

/// Keeps every record in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub steps: Vec<StepMetrics>,
    pub aborts: Vec<AbortRecord>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.steps.push(metrics.clone());
        Ok(())
    }

    fn abort(&mut self, record: &AbortRecord) -> Result<()> {
        self.aborts.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON object per line to a file.
pub struct JsonlSink {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: std::io::BufWriter::new(file),
        })
    }

    fn line(&mut self, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string(value)?;
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.line(metrics)
    }

    fn abort(&mut self, record: &AbortRecord) -> Result<()> {
        #[derive(Serialize)]
        struct Tagged<'a> {
            abort: &'a AbortRecord,
        }
        self.line(&Tagged { abort: record })
    }
}

/// Candidates of one episode with their rewards and advantages.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub subsets: Vec<Vec<usize>>,
    pub old_logps: Vec<f64>,
    pub margins: Vec<f64>,
    pub advantages: Vec<f64>,
    pub recalls: Vec<f64>,
    pub entropy_sum: f64,
    pub steps: usize,
}

/// Sample `cfg.n` candidates from `params` and score them.
pub fn score_group(
    params: &PolicyParams,
    episode: &Episode,
    oracle: &dyn Oracle,
    cfg: &TrainConfig,
    sample_seed: u64,
) -> Result<ScoredGroup> {
    let cands = sample_subsets(params, episode, cfg.t_prime, cfg.n, sample_seed)?;
    let mut margins = Vec::with_capacity(cands.len());
    for c in &cands {
        let logits = oracle
            .logits(episode, &c.time_sorted)
            .map_err(|e| Error::Scoring {
                episode: episode.id.clone(),
                source: Box::new(e),
            })?;
        margins.push(margin_reward(&logits, episode.correct)?.margin);
    }
    let adv = group_advantages(&margins, cfg.eps_adv)?;
    Ok(ScoredGroup {
        recalls: cands.iter().map(|c| episode.needle_recall(&c.time_sorted)).collect(),
        old_logps: cands.iter().map(|c| c.logp()).collect(),
        entropy_sum: cands.iter().flat_map(|c| &c.step_entropies).sum(),
        steps: cands.iter().map(|c| c.indices.len()).sum(),
        subsets: cands.into_iter().map(|c| c.indices).collect(),
        margins,
        advantages: adv.advantages,
    })
}

/// The training loop state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    params: PolicyParams,
    opt: OptimizerState,
    dataset: &'a [Episode],
    oracle: &'a dyn Oracle,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, params: PolicyParams, dataset: &'a [Episode], oracle: &'a dyn Oracle) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(invalid_input("training dataset is empty"));
        }
        if params.dims() != cfg.dims {
            return Err(invalid_config(format!(
                "parameter dims {:?} differ from configured {:?}",
                params.dims(),
                cfg.dims
            )));
        }
        for ep in dataset {
            ep.validate()?;
            if cfg.t_prime > ep.t {
                return Err(invalid_config(format!("t_prime={} exceeds T={} of {}", cfg.t_prime, ep.t, ep.id)));
            }
        }
        let opt = OptimizerState::new(&params);
        Ok(Self {
            cfg,
            params,
            opt,
            dataset,
            oracle,
            step: 0,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    /// Outer steps completed.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Episode indices of outer step `step`.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.dataset.len();
        let mut r = rng::stream("batch", &[self.cfg.seed.into(), step.into()]);
        if self.cfg.batch_size >= n {
            (0..n).collect()
        } else {
            index::sample(&mut r, n, self.cfg.batch_size).into_vec()
        }
    }

    fn score_batch(&self, batch: &[usize], step: usize, inner: usize) -> Result<Vec<ScoredGroup>> {
        let seed = rng::derive_seed("sample", &[self.cfg.seed.into(), step.into(), inner.into()]);
        batch
            .par_iter()
            .map(|&i| score_group(&self.params, &self.dataset[i], self.oracle, &self.cfg, seed))
            .collect()
    }

    /// Run one outer step. On failure the parameters are left as they were
    /// after the last successful update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        self.step_inner().map_err(|(_, e)| e)
    }

    fn step_inner(&mut self) -> std::result::Result<StepMetrics, (usize, Error)> {
        let step = self.step;
        let batch = self.batch_indices(step);
        let mut groups = self.score_batch(&batch, step, 0).map_err(|e| (0, e))?;

        let n_cand: usize = groups.iter().map(|g| g.margins.len()).sum();
        let n_steps: usize = groups.iter().map(|g| g.steps).sum();
        let mean_reward = groups.iter().flat_map(|g| &g.margins).sum::<f64>() / n_cand as f64;
        let needle_recall = groups.iter().flat_map(|g| &g.recalls).sum::<f64>() / n_cand as f64;
        let mean_entropy = groups.iter().map(|g| g.entropy_sum).sum::<f64>() / n_steps as f64;
        let flat_groups = groups
            .iter()
            .filter(|g| g.advantages.iter().all(|&a| a == 0.0))
            .count();

        let mut last = None;
        let mut max_log_ratio: f64 = 0.0;
        for inner in 0..self.cfg.k {
            if inner > 0 && self.cfg.inner_mode == InnerMode::Resample {
                groups = self.score_batch(&batch, step, inner).map_err(|e| (inner, e))?;
            }
            let items: Vec<GroupBatch<'_>> = batch
                .iter()
                .zip(&groups)
                .map(|(&i, g)| GroupBatch {
                    episode: &self.dataset[i],
                    subsets: &g.subsets,
                    old_logps: &g.old_logps,
                    advantages: &g.advantages,
                })
                .collect();
            let out = objective_and_gradient(&self.params, &items, self.cfg.beta, self.cfg.entropy_mode)
                .map_err(|e| (inner, e))?;
            max_log_ratio = max_log_ratio.max(out.max_abs_log_ratio);
            let mut descent = out.grads;
            descent.scale(-1.0);
            let update = step * self.cfg.k + inner;
            let mut trial = self.params.clone();
            let mut trial_opt = self.opt.clone();
            let info = optimizer_step(&mut trial_opt, &mut trial, &descent, update, &self.cfg)
                .map_err(|e| (inner, e))?;
            self.params = trial;
            self.opt = trial_opt;
            last = Some((info, out.objective));
        }
        let (info, objective) = last.expect("K >= 1");
        self.step += 1;
        Ok(StepMetrics {
            step,
            mean_reward,
            mean_entropy,
            grad_norm: info.grad_norm,
            lr: info.lr_heads,
            needle_recall,
            objective,
            max_log_ratio,
            flat_groups,
        })
    }

    /// Run to `total_steps`, logging every step and checkpointing into
    /// `checkpoint_dir` when given.
    pub fn run(&mut self, sink: &mut dyn MetricsSink, checkpoint_dir: Option<&Path>) -> Result<()> {
        while self.step < self.cfg.total_steps {
            match self.step_inner() {
                Ok(m) => {
                    sink.record(&m)?;
                    let every = self.cfg.checkpoint_every;
                    if let Some(dir) = checkpoint_dir {
                        if every > 0 && self.step.is_multiple_of(every) && self.step < self.cfg.total_steps {
                            checkpoint::save(&self.params, dir, &format!("step-{:06}", self.step), Dtype::F64)?;
                        }
                    }
                }
                Err((inner, e)) => {
                    sink.abort(&AbortRecord {
                        step: self.step,
                        inner_update: inner,
                        error: e.to_string(),
                        param_norm: self.params.global_norm(),
                    })?;
                    return Err(e);
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&self.params, dir, "final", Dtype::F64)?;
        }
        Ok(())
    }
}

/// Train from `params` for `cfg.total_steps` outer steps.
pub fn train(
    cfg: &TrainConfig,
    params: PolicyParams,
    dataset: &[Episode],
    oracle: &dyn Oracle,
    sink: &mut dyn MetricsSink,
    checkpoint_dir: Option<&Path>,
) -> Result<PolicyParams> {
    let mut trainer = Trainer::new(cfg.clone(), params, dataset, oracle)?;
    trainer.run(sink, checkpoint_dir)?;
    Ok(trainer.into_params())
}
