//! Synthetic episodes and the deterministic reward oracle.
//!
//! An episode is a stand-in for a video plus a multiple-choice question:
//! `T` frames, each a sequence of `L` feature tokens. A handful of needle
//! frames carry a fixed signature direction on top of Gaussian background
//! noise. The oracle raises the correct option's logit in proportion to the
//! fraction of needles a subset covers, so the reward is a pure function of
//! the selected frame *set*.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::rng::{self, Key};

/// Shape and signal parameters of generated episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Frames per episode.
    #[serde(rename = "T")]
    pub t: usize,
    /// Tokens per frame.
    #[serde(rename = "L")]
    pub l: usize,
    pub d_in: usize,
    pub d_q: usize,
    /// Answer options.
    #[serde(rename = "M")]
    pub m: usize,
    pub n_needle: usize,
    /// Length of the signature added to every token of a needle frame.
    pub signal_strength: f64,
    /// When set, needles are drawn from one contiguous window of this width.
    pub needle_window: Option<usize>,
    /// Fraction of generated episodes whose answer ignores the frames.
    pub frame_blind_fraction: f64,
    /// Seed of the shared needle signature direction.
    pub signature_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            t: 128,
            l: 1,
            d_in: 32,
            d_q: 16,
            m: 4,
            n_needle: 3,
            signal_strength: 6.0,
            needle_window: None,
            frame_blind_fraction: 0.0,
            signature_seed: 0x5EED,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(invalid_config(format!("T must be >= 2, got {}", self.t)));
        }
        if self.n_needle == 0 || self.n_needle > self.t {
            return Err(invalid_config(format!(
                "n_needle must lie in [1, T={}], got {}",
                self.t, self.n_needle
            )));
        }
        if self.l == 0 || self.d_in == 0 || self.d_q == 0 {
            return Err(invalid_config("L, d_in and d_q must be >= 1"));
        }
        if self.m < 2 {
            return Err(invalid_config(format!("M must be >= 2, got {}", self.m)));
        }
        if !self.signal_strength.is_finite() {
            return Err(invalid_config("signal_strength must be finite"));
        }
        if let Some(w) = self.needle_window {
            if w < self.n_needle || w > self.t {
                return Err(invalid_config(format!(
                    "needle_window must lie in [n_needle, T], got {w}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.frame_blind_fraction) {
            return Err(invalid_config("frame_blind_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Unit vector shared by every needle frame generated under this config.
    pub fn signature(&self) -> Vec<f64> {
        let mut rng = rng::stream("signature", &[self.signature_seed.into(), self.d_in.into()]);
        let mut v: Vec<f64> = (0..self.d_in).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

fn default_grounded() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// One synthetic video/question pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub d_in: usize,
    /// `frames[t][l]` is token `l` of frame `t`.
    pub frames: Vec<Vec<Vec<f64>>>,
    /// Sorted needle frame indices.
    #[serde(rename = "needles")]
    pub needle_set: Vec<usize>,
    pub query: Vec<f64>,
    pub options: Vec<String>,
    pub correct: usize,
    /// False for questions whose answer does not depend on the frames.
    /// Omitted from the JSON form when true.
    #[serde(default = "default_grounded", skip_serializing_if = "is_true")]
    pub grounded: bool,
}

impl Episode {
    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    /// Token slice of frame `t`, token `l`.
    pub fn token(&self, t: usize, l: usize) -> &[f64] {
        &self.frames[t][l]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(invalid_input(format!("episode {}: {m}", self.id)));
        if self.frames.len() != self.t {
            return bad(format!("{} frames but T={}", self.frames.len(), self.t));
        }
        if self.l == 0 {
            return bad("L must be >= 1".into());
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.l {
                return bad(format!("frame {t} has {} tokens, expected {}", frame.len(), self.l));
            }
            for tok in frame {
                if tok.len() != self.d_in {
                    return bad(format!("frame {t} token width {} != d_in {}", tok.len(), self.d_in));
                }
                if tok.iter().any(|x| !x.is_finite()) {
                    return bad(format!("frame {t} has a non-finite token"));
                }
            }
        }
        if self.needle_set.is_empty() || self.needle_set.len() > self.t {
            return bad("needle set size must lie in [1, T]".into());
        }
        if self.needle_set.windows(2).any(|w| w[0] >= w[1]) {
            return bad("needles must be strictly increasing".into());
        }
        if self.needle_set.iter().any(|&n| n >= self.t) {
            return bad("needle index out of range".into());
        }
        if self.options.len() < 2 {
            return bad("at least two options are required".into());
        }
        if self.correct >= self.options.len() {
            return bad("correct index out of range".into());
        }
        if self.query.iter().any(|x| !x.is_finite()) {
            return bad("non-finite query".into());
        }
        Ok(())
    }

    /// Fraction of needles contained in `subset`.
    pub fn needle_recall(&self, subset: &[usize]) -> f64 {
        let hits = self
            .needle_set
            .iter()
            .filter(|n| subset.contains(n))
            .count();
        hits as f64 / self.needle_set.len() as f64
    }
}

fn option_labels(m: usize) -> Vec<String> {
    (0..m)
        .map(|i| {
            if i < 26 {
                char::from(b'A' + i as u8).to_string()
            } else {
                format!("O{i}")
            }
        })
        .collect()
}

/// Generate one episode; the id is derived from the seed.
pub fn gen_episode(cfg: &EnvConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = rng::stream("episode", &[seed.into()]);
    let t = cfg.t;
    let needles: Vec<usize> = match cfg.needle_window {
        Some(w) => {
            let start = rng.random_range(0..=t - w);
            let mut picked: Vec<usize> = index::sample(&mut rng, w, cfg.n_needle)
                .into_iter()
                .map(|i| start + i)
                .collect();
            picked.sort_unstable();
            picked
        }
        None => {
            let mut picked = index::sample(&mut rng, t, cfg.n_needle).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let grounded = !(cfg.frame_blind_fraction > 0.0 && rng.random::<f64>() < cfg.frame_blind_fraction);
    build_episode(cfg, &mut rng, format!("ep-{seed:016x}"), needles, grounded)
}

/// Generate an episode whose needles sit at the given frame indices.
pub fn gen_episode_with_needles(cfg: &EnvConfig, seed: u64, needles: &[usize]) -> Result<Episode> {
    cfg.validate()?;
    let mut set: Vec<usize> = needles.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.is_empty() || set.len() != needles.len() || set.iter().any(|&n| n >= cfg.t) {
        return Err(invalid_input("needles must be distinct indices below T"));
    }
    let mut rng = rng::stream("episode-placed", &[seed.into(), cfg.t.into()]);
    let id = format!("ep-{seed:016x}-T{}-n{}", cfg.t, set.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("."));
    build_episode(cfg, &mut rng, id, set, true)
}

fn build_episode(
    cfg: &EnvConfig,
    rng: &mut impl Rng,
    id: String,
    needles: Vec<usize>,
    grounded: bool,
) -> Result<Episode> {
    let signature = cfg.signature();
    let needle_lookup: BTreeSet<usize> = needles.iter().copied().collect();
    let mut frames = Vec::with_capacity(cfg.t);
    for t in 0..cfg.t {
        let is_needle = needle_lookup.contains(&t);
        let frame: Vec<Vec<f64>> = (0..cfg.l)
            .map(|_| {
                (0..cfg.d_in)
                    .map(|d| {
                        let noise: f64 = rng.sample(StandardNormal);
                        if is_needle {
                            noise + cfg.signal_strength * signature[d]
                        } else {
                            noise
                        }
                    })
                    .collect()
            })
            .collect();
        frames.push(frame);
    }
    let query: Vec<f64> = (0..cfg.d_q).map(|_| rng.sample(StandardNormal)).collect();
    let correct = rng.random_range(0..cfg.m);
    Ok(Episode {
        id,
        t: cfg.t,
        l: cfg.l,
        d_in: cfg.d_in,
        frames,
        needle_set: needles,
        query,
        options: option_labels(cfg.m),
        correct,
        grounded,
    })
}

/// `n` episodes; episode `i` is generated from a seed derived from `(seed, i)`.
pub fn gen_dataset(cfg: &EnvConfig, n: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..n)
        .map(|i| gen_episode(cfg, rng::derive_seed("dataset", &[seed.into(), i.into()])))
        .collect()
}

/// Write episodes as JSONL, one per line.
pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read and validate a JSONL episode file.
pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| {
            invalid_input(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}

/// A frame that pushes a wrong option up whenever it is selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoy {
    pub frame: usize,
    pub option: usize,
    pub boost: f64,
}

/// Parameters of the synthetic reward oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Slope of the correct option's logit in needle coverage.
    pub gain_a: f64,
    /// Correct option's logit at zero coverage.
    pub bias_b: f64,
    pub decoys: Vec<Decoy>,
    pub noise_std: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            gain_a: 4.0,
            bias_b: -2.0,
            decoys: Vec::new(),
            noise_std: 0.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_a > 0.0 && self.gain_a.is_finite()) {
            return Err(invalid_config("gain_a must be a positive finite number"));
        }
        if !self.bias_b.is_finite() {
            return Err(invalid_config("bias_b must be finite"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid_config("noise_std must be >= 0"));
        }
        if self.decoys.iter().any(|d| !d.boost.is_finite()) {
            return Err(invalid_config("decoy boosts must be finite"));
        }
        Ok(())
    }
}

/// Pre-softmax scores, one per answer option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionLogits(pub Vec<f64>);

impl OptionLogits {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Anything that can score an answer-option set for a frame subset.
pub trait Oracle: Send + Sync {
    fn logits(&self, episode: &Episode, subset: &[usize]) -> Result<OptionLogits>;
}

/// Check that `subset` holds distinct indices below `t`; returns it sorted.
pub fn sorted_subset(subset: &[usize], t: usize) -> Result<Vec<usize>> {
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    if let Some(&bad) = sorted.iter().find(|&&i| i >= t) {
        return Err(invalid_input(format!("frame index {bad} out of range for T={t}")));
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid_input("duplicate frame index in subset"));
    }
    Ok(sorted)
}

/// Score the answer options for the frame set `subset`.
///
/// Depends only on the set of frames, never on their order.
pub fn oracle_logits(episode: &Episode, subset: &[usize], oc: &OracleConfig) -> Result<OptionLogits> {
    let sorted = sorted_subset(subset, episode.t)?;
    let m = episode.num_options();
    let mut z = vec![0.0; m];
    let coverage = if episode.grounded {
        let hits = episode
            .needle_set
            .iter()
            .filter(|n| sorted.binary_search(n).is_ok())
            .count();
        hits as f64 / episode.needle_set.len() as f64
    } else {
        0.5
    };
    z[episode.correct] = oc.gain_a * coverage + oc.bias_b;
    for d in &oc.decoys {
        if d.option < m && d.option != episode.correct && sorted.binary_search(&d.frame).is_ok() {
            z[d.option] += d.boost;
        }
    }
    if oc.noise_std > 0.0 {
        let normal = Normal::new(0.0, oc.noise_std).map_err(|e| invalid_config(e.to_string()))?;
        let mut keys: Vec<Key<'_>> = vec![episode.id.as_str().into()];
        keys.extend(sorted.iter().map(|&i| Key::from(i)));
        let mut rng = rng::stream("oracle-noise", &keys);
        for zi in z.iter_mut() {
            *zi += normal.sample(&mut rng);
        }
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("oracle logits for {}", episode.id),
        });
    }
    Ok(OptionLogits(z))
}

/// The in-process oracle.
#[derive(Debug, Clone, Default)]
pub struct SyntheticOracle {
    pub config: OracleConfig,
}

impl SyntheticOracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl Oracle for SyntheticOracle {
    fn logits(&self, episode: &Episode, subset: &[usize]) -> Result<OptionLogits> {
        oracle_logits(episode, subset, &self.config)
    }
}
