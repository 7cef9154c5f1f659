//! Reward-variance data filtering.
//!
//! Each episode is probed with 16 frame subsets: 8 drawn from overlapping
//! temporal windows and 8 from their complements. An episode whose margin
//! barely moves across the probes does not depend on what the selector picks,
//! so it is dropped when the probe variance is at or below `tau`.

use std::ops::Range;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::reward::{margin_reward, reward_variance};
use crate::rng;
use crate::synthenv::{Episode, Oracle};

/// Number of temporal windows.
pub const NUM_WINDOWS: usize = 8;
/// Default frames sampled per probe.
pub const DEFAULT_PROBE_K: usize = 32;
/// Default retention threshold.
pub const DEFAULT_TAU: f64 = 0.21;

/// The 8 windows and their complements for one episode length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    #[serde(rename = "T")]
    pub t: usize,
    /// Window width `ceil(T/8)`.
    pub w: usize,
    /// Stride `ceil(w/2)`.
    pub stride: usize,
    /// Half-open ranges making up each window; the last one wraps.
    pub windows: Vec<Vec<Range<usize>>>,
    /// Frames per probe.
    pub k: usize,
}

impl WindowSpec {
    /// Sorted frame indices of window `i` (0-based).
    pub fn window(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.windows[i].iter().flat_map(|r| r.clone()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Sorted frame indices outside window `i`.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        let inside = self.window(i);
        (0..self.t).filter(|f| inside.binary_search(f).is_err()).collect()
    }
}

/// Windows of width `ceil(T/8)` at stride `ceil(w/2)`; the 8th window is
/// `[0, s) ∪ [7s, T)`.
pub fn temporal_windows(t: usize, k: usize) -> Result<WindowSpec> {
    if t < NUM_WINDOWS {
        return Err(invalid_input(format!("T must be >= {NUM_WINDOWS}, got {t}")));
    }
    if k == 0 {
        return Err(invalid_input("probe size k must be >= 1"));
    }
    let w = t.div_ceil(NUM_WINDOWS);
    let s = w.div_ceil(2);
    let clip = |a: usize, b: usize| a.min(t)..b.min(t);
    let mut windows: Vec<Vec<Range<usize>>> = (0..NUM_WINDOWS - 1)
        .map(|i| vec![clip(i * s, i * s + w)])
        .collect();
    windows.push(vec![clip(0, s), clip(7 * s, t)]);
    Ok(WindowSpec {
        t,
        w,
        stride: s,
        windows,
        k,
    })
}

/// The 16 probe subsets: window samples first, then complement samples.
/// Each is sorted and depends only on `(episode id, probe index)`.
pub fn build_probe_subsets(episode: &Episode, spec: &WindowSpec) -> Result<Vec<Vec<usize>>> {
    if spec.t != episode.t {
        return Err(invalid_input(format!(
            "window spec is for T={}, episode {} has T={}",
            spec.t, episode.id, episode.t
        )));
    }
    let regions = (0..NUM_WINDOWS)
        .map(|i| spec.window(i))
        .chain((0..NUM_WINDOWS).map(|i| spec.complement(i)));
    regions
        .enumerate()
        .map(|(i, region)| {
            if region.is_empty() {
                return Err(invalid_input(format!("probe region {i} of {} is empty", episode.id)));
            }
            if region.len() <= spec.k {
                return Ok(region);
            }
            let mut r = rng::stream("probe", &[episode.id.as_str().into(), i.into()]);
            let mut picked: Vec<usize> = index::sample(&mut r, region.len(), spec.k)
                .into_iter()
                .map(|j| region[j])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect()
}

/// Probe results of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeProbe {
    pub id: String,
    pub margins: Vec<f64>,
    pub variance: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[0, max]`; values equal to `max` fall in the
/// last bin.
pub fn histogram(values: &[f64], bins: usize, max: f64) -> Histogram {
    let bins = bins.max(1);
    let width = max / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if width > 0.0 { (v / width).floor() as isize } else { 0 };
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub tau: f64,
    pub probe_k: usize,
    pub episodes: Vec<EpisodeProbe>,
    pub retained: usize,
    pub retention_rate: f64,
    /// Probe-variance histogram over `[0, 1]`, the largest possible variance
    /// of margins in `[-1, 1]`.
    pub variance_histogram: Histogram,
}

/// Probe margins and their variance for one episode.
pub fn probe_episode(episode: &Episode, oracle: &dyn Oracle, probe_k: usize) -> Result<(Vec<f64>, f64)> {
    let attach = |e: Error| Error::Scoring {
        episode: episode.id.clone(),
        source: Box::new(e),
    };
    let spec = temporal_windows(episode.t, probe_k).map_err(attach)?;
    let subsets = build_probe_subsets(episode, &spec).map_err(attach)?;
    let margins = subsets
        .iter()
        .map(|s| {
            let z = oracle.logits(episode, s)?;
            Ok(margin_reward(&z, episode.correct)?.margin)
        })
        .collect::<Result<Vec<f64>>>()
        .map_err(attach)?;
    let variance = reward_variance(&margins)?;
    Ok((margins, variance))
}

/// Probe every episode and keep those with variance strictly above `tau`.
pub fn score_and_filter(
    dataset: &[Episode],
    oracle: &dyn Oracle,
    tau: f64,
    probe_k: usize,
) -> Result<(Vec<Episode>, FilterReport)> {
    if tau.is_nan() {
        return Err(invalid_input("tau must not be NaN"));
    }
    let probes: Vec<(Vec<f64>, f64)> = dataset
        .par_iter()
        .map(|ep| probe_episode(ep, oracle, probe_k))
        .collect::<Result<_>>()?;
    let mut kept = Vec::new();
    let mut episodes = Vec::with_capacity(dataset.len());
    for (ep, (margins, variance)) in dataset.iter().zip(probes) {
        let retained = variance > tau;
        if retained {
            kept.push(ep.clone());
        }
        episodes.push(EpisodeProbe {
            id: ep.id.clone(),
            margins,
            variance,
            retained,
        });
    }
    let variances: Vec<f64> = episodes.iter().map(|e| e.variance).collect();
    let report = FilterReport {
        tau,
        probe_k,
        retained: kept.len(),
        retention_rate: if dataset.is_empty() {
            0.0
        } else {
            kept.len() as f64 / dataset.len() as f64
        },
        variance_histogram: histogram(&variances, 20, 1.0),
        episodes,
    };
    Ok((kept, report))
}

/// Pick a threshold from held-out variances of episodes known to need the
/// frames (`positives`) and of episodes that do not (`negatives`).
///
/// Returns the midpoint between the largest negative variance and the
/// smallest positive one above it that keeps the most positives while
/// dropping every negative; if no positive exceeds all negatives, the
/// largest negative variance (dropping every negative).
pub fn calibrate_tau(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(invalid_input("calibration needs positive and negative examples"));
    }
    if positives.iter().chain(negatives).any(|v| !v.is_finite()) {
        return Err(invalid_input("non-finite calibration variance"));
    }
    let neg_max = negatives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let above = positives
        .iter()
        .cloned()
        .filter(|&p| p > neg_max)
        .fold(f64::INFINITY, f64::min);
    Ok(if above.is_finite() { 0.5 * (neg_max + above) } else { neg_max })
}
