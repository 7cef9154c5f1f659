//! The `refocus` command line.
//!
//! Every subcommand resolves its configuration (file, then flags), writes
//! `resolved-config.json` into the output directory before doing any work,
//! and finishes with `manifest.json` listing every file it produced with
//! its SHA-256.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for
//! runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    self, grid_plot_data, likelihood_bins_eval, pairwise_diversity, pdf_plot_data, selection_time_entropy,
    vniah_sweep, NiahGrid, SamplingOptions,
};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::filterpipe::{self, score_and_filter};
use crate::policy::checkpoint;
use crate::policy::{EntropyMode, PolicyParams};
use crate::rewardsvc::{ClientConfig, RemoteOracle};
use crate::rng;
use crate::synthenv::{gen_dataset, gen_episode_with_needles, read_jsonl, write_jsonl, EnvConfig, Episode, Oracle, OracleConfig, SyntheticOracle};
use crate::trainer::{AbortRecord, InnerMode, JsonlSink, MemorySink, MetricsSink, StepMetrics, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterOptions {
    pub tau: f64,
    pub probe_k: usize,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            tau: filterpipe::DEFAULT_TAU,
            probe_k: filterpipe::DEFAULT_PROBE_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Frames per subset; the training value when unset.
    pub t_prime: Option<usize>,
    pub n_runs: usize,
    pub ks: Vec<u32>,
    pub subsets_per_bin: usize,
    pub frame_counts: Vec<usize>,
    pub positions: Vec<f64>,
    /// Neighbour rank of the selection-time entropy.
    pub entropy_k: usize,
    /// Also write whitespace-separated plot columns.
    pub plot_data: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            t_prime: None,
            n_runs: 64,
            ks: vec![20, 40, 60, 80],
            subsets_per_bin: 32,
            frame_counts: vec![64, 128, 192, 256, 384, 512],
            positions: vec![0.1, 0.26, 0.42, 0.58, 0.74, 0.9],
            entropy_k: 1,
            plot_data: false,
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; also the training seed.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Episodes generated when no dataset file is given.
    pub episodes: usize,
    pub env: EnvConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub filter: FilterOptions,
    pub analysis: AnalysisOptions,
    /// Remote scoring service; the in-process oracle when absent.
    pub service: Option<ClientConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            episodes: 1024,
            env: EnvConfig::default(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            filter: FilterOptions::default(),
            analysis: AnalysisOptions::default(),
            service: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: &dyn std::fmt::Display| invalid_config(format!("{}: {e}", path.display()));
        if path.extension().is_some_and(|e| e == "json") {
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
            // A resolved-config.json written by an earlier run carries the
            // configuration under "config" next to the command and its args.
            if value.get("command").is_some() {
                if let Some(inner) = value.get_mut("config").map(serde_json::Value::take) {
                    value = inner;
                }
            }
            serde_json::from_value(value).map_err(|e| bad(&e))
        } else {
            toml::from_str(&text).map_err(|e| invalid_config(format!("{}: {e}", path.display())))
        }
    }

    fn analysis_t_prime(&self) -> usize {
        self.analysis.t_prime.unwrap_or(self.train.t_prime)
    }
}

#[derive(Debug, Parser)]
#[command(name = "refocus", version, about = "Reinforcement-guided frame-subset selection lab")]
struct Cli {
    /// TOML (or .json) run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for resolved-config.json, manifest.json and run outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (1 for a single-threaded schedule).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Score with a remote service at this base URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an episode dataset.
    Gen(GenArgs),
    /// Keep only episodes whose probe margins vary.
    Filter(FilterArgs),
    /// Train the selector.
    Train(TrainArgs),
    /// Selection PDFs, their diversity and selection-time entropy.
    Analyze(EvalArgs),
    /// Needle-mass sweep over episode length and needle position.
    Niah(EvalArgs),
    /// Accuracy of subsets drawn from likelihood-ranked frame bins.
    Bins(EvalArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct EnvFlags {
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_q: Option<usize>,
    #[arg(long)]
    n_needle: Option<usize>,
    #[arg(long)]
    needle_window: Option<usize>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    frame_blind_fraction: Option<f64>,
    /// Episodes to generate.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GenArgs {
    #[command(flatten)]
    env: EnvFlags,
    /// Output JSONL; defaults to `<out-dir>/episodes.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Retained episodes; defaults to `<out-dir>/filtered.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    probe_k: Option<usize>,
    /// Report path; defaults to `<out-dir>/reports/filter-report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    env: EnvFlags,
    /// Training episodes; generated from the env config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Starting checkpoint manifest; fresh parameters when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "N")]
    candidates: Option<usize>,
    #[arg(long)]
    t_prime: Option<usize>,
    #[arg(long = "K")]
    inner: Option<usize>,
    #[arg(long)]
    inner_mode: Option<InnerMode>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    entropy_mode: Option<EntropyMode>,
    #[arg(long)]
    lr_heads: Option<f64>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    env: EnvFlags,
    /// Policy checkpoint manifest; fresh parameters when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Episodes; generated from the env config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    t_prime: Option<usize>,
    #[arg(long)]
    n_runs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<u32>>,
    #[arg(long)]
    subsets_per_bin: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    frame_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    positions: Option<Vec<f64>>,
    #[arg(long)]
    plot_data: bool,
}

fn apply_env(cfg: &mut RunConfig, f: &EnvFlags) {
    let e = &mut cfg.env;
    macro_rules! set {
        ($($dst:expr => $src:expr),* $(,)?) => { $(if let Some(v) = $src { $dst = v; })* };
    }
    set!(e.t => f.t, e.l => f.l, e.m => f.m, e.d_in => f.d_in, e.d_q => f.d_q, e.n_needle => f.n_needle,
        e.signal_strength => f.signal_strength, e.frame_blind_fraction => f.frame_blind_fraction,
        cfg.episodes => f.n);
    if f.needle_window.is_some() {
        e.needle_window = f.needle_window;
    }
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) {
    apply_env(cfg, &a.env);
    let o = &mut cfg.analysis;
    if a.t_prime.is_some() {
        o.t_prime = a.t_prime;
    }
    if let Some(v) = a.n_runs {
        o.n_runs = v;
    }
    if let Some(v) = &a.ks {
        o.ks = v.clone();
    }
    if let Some(v) = a.subsets_per_bin {
        o.subsets_per_bin = v;
    }
    if let Some(v) = &a.frame_counts {
        o.frame_counts = v.clone();
    }
    if let Some(v) = &a.positions {
        o.positions = v.clone();
    }
    o.plot_data |= a.plot_data;
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    apply_env(cfg, &a.env);
    let t = &mut cfg.train;
    macro_rules! set {
        ($($dst:expr => $src:expr),* $(,)?) => { $(if let Some(v) = $src { $dst = v; })* };
    }
    set!(t.total_steps => a.steps, t.batch_size => a.batch_size, t.n => a.candidates, t.t_prime => a.t_prime,
        t.k => a.inner, t.inner_mode => a.inner_mode, t.beta => a.beta, t.entropy_mode => a.entropy_mode,
        t.lr_heads => a.lr_heads, t.lr_backbone => a.lr_backbone, t.warmup_ratio => a.warmup_ratio,
        t.weight_decay => a.weight_decay, t.grad_clip => a.grad_clip, t.checkpoint_every => a.checkpoint_every);
}

/// Output files of one command.
#[derive(Debug, Default, Serialize)]
struct Manifest {
    command: String,
    outputs: Vec<OutputEntry>,
    /// Paths under this directory are recorded relative to it.
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Debug, Serialize)]
struct OutputEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

impl Manifest {
    fn add(&mut self, path: &Path) -> Result<()> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let shown = path.strip_prefix(&self.base).unwrap_or(path);
        self.outputs.push(OutputEntry {
            path: shown.display().to_string(),
            bytes: data.len() as u64,
            sha256: hex::encode(Sha256::digest(&data)),
        });
        Ok(())
    }

    fn add_dir(&mut self, dir: &Path) -> Result<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            self.add(&f)?;
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn make_oracle(cfg: &RunConfig) -> Result<Box<dyn Oracle>> {
    match &cfg.service {
        Some(client) => {
            let client = client.clone().from_env();
            Ok(Box::new(RemoteOracle::new(client)?))
        }
        None => Ok(Box::new(SyntheticOracle::new(cfg.oracle.clone())?)),
    }
}

fn load_or_generate(cfg: &RunConfig, data: Option<&Path>, tag: &str) -> Result<Vec<Episode>> {
    match data {
        Some(p) => read_jsonl(p),
        None => gen_dataset(&cfg.env, cfg.episodes, rng::derive_seed(tag, &[cfg.seed.into()])),
    }
}

fn load_or_init(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<PolicyParams> {
    match checkpoint_path {
        Some(p) => checkpoint::load(p),
        None => PolicyParams::init(cfg.train.dims, rng::derive_seed("init", &[cfg.seed.into()])),
    }
}

/// Make the policy input widths agree with the episodes.
fn sync_dims(cfg: &mut RunConfig, episodes: &[Episode]) -> Result<()> {
    let first = episodes.first().ok_or_else(|| invalid_input("dataset is empty"))?;
    cfg.train.dims.d_in = first.d_in;
    cfg.train.dims.d_q = first.query.len();
    Ok(())
}

struct Resolved {
    cfg: RunConfig,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct ResolvedRecord<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    config: &'a RunConfig,
}

fn begin<A: Serialize>(r: &Resolved, command: &str, args: &A) -> Result<Manifest> {
    std::fs::create_dir_all(&r.out_dir).map_err(|e| Error::io(&r.out_dir, e))?;
    write_json(
        &r.out_dir.join("resolved-config.json"),
        &ResolvedRecord {
            command,
            args,
            config: &r.cfg,
        },
    )?;
    Ok(Manifest {
        command: command.into(),
        outputs: Vec::new(),
        base: r.out_dir.clone(),
    })
}

fn finish(r: &Resolved, mut manifest: Manifest) -> Result<()> {
    manifest.add(&r.out_dir.join("resolved-config.json"))?;
    write_json(&r.out_dir.join("manifest.json"), &manifest)
}

fn cmd_gen(r: &Resolved, args: &GenArgs) -> Result<()> {
    let mut m = begin(r, "gen", args)?;
    let out = args.out.clone().unwrap_or_else(|| r.out_dir.join("episodes.jsonl"));
    let episodes = gen_dataset(&r.cfg.env, r.cfg.episodes, r.cfg.seed)?;
    write_jsonl(&out, &episodes)?;
    m.add(&out)?;
    finish(r, m)
}

fn cmd_filter(r: &Resolved, args: &FilterArgs) -> Result<()> {
    let mut m = begin(r, "filter", args)?;
    let episodes = read_jsonl(&args.input)?;
    let oracle = make_oracle(&r.cfg)?;
    let (kept, report) = score_and_filter(&episodes, oracle.as_ref(), r.cfg.filter.tau, r.cfg.filter.probe_k)?;
    let out = args.out.clone().unwrap_or_else(|| r.out_dir.join("filtered.jsonl"));
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| r.out_dir.join("reports").join("filter-report.json"));
    write_jsonl(&out, &kept)?;
    write_json(&report_path, &report)?;
    log::info!("kept {} of {} episodes", kept.len(), episodes.len());
    m.add(&out)?;
    m.add(&report_path)?;
    finish(r, m)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    episodes: usize,
    final_mean_reward: f64,
    final_needle_recall: f64,
}

/// Writes to the metrics file and keeps a copy for the summary.
struct Tee<'a>(&'a mut JsonlSink, &'a mut MemorySink);

impl MetricsSink for Tee<'_> {
    fn record(&mut self, m: &StepMetrics) -> Result<()> {
        self.1.record(m)?;
        self.0.record(m)
    }

    fn abort(&mut self, a: &AbortRecord) -> Result<()> {
        self.1.abort(a)?;
        self.0.abort(a)
    }
}

fn cmd_train(r: &Resolved, args: &TrainArgs) -> Result<()> {
    let mut m = begin(r, "train", args)?;
    let episodes = load_or_generate(&r.cfg, args.data.as_deref(), "train-data")?;
    let params = load_or_init(&r.cfg, args.init.as_deref())?;
    let oracle = make_oracle(&r.cfg)?;
    let tcfg = r.cfg.train.clone();
    let metrics_path = r.out_dir.join("metrics.jsonl");
    let ckpt_dir = r.out_dir.join("checkpoints");
    let mut sink = JsonlSink::create(&metrics_path)?;
    let mut trainer = Trainer::new(tcfg, params, &episodes, oracle.as_ref())?;
    let mut memory = MemorySink::default();
    trainer.run(&mut Tee(&mut sink, &mut memory), Some(&ckpt_dir))?;
    let tail = &memory.steps[memory.steps.len().saturating_sub(200)..];
    let n = tail.len().max(1) as f64;
    let summary = TrainSummary {
        steps: memory.steps.len(),
        episodes: episodes.len(),
        final_mean_reward: tail.iter().map(|s| s.mean_reward).sum::<f64>() / n,
        final_needle_recall: tail.iter().map(|s| s.needle_recall).sum::<f64>() / n,
    };
    let summary_path = r.out_dir.join("reports").join("train-summary.json");
    write_json(&summary_path, &summary)?;
    m.add(&metrics_path)?;
    m.add_dir(&ckpt_dir)?;
    m.add(&summary_path)?;
    finish(r, m)
}

#[derive(Serialize)]
struct DiversityGroup {
    frames: usize,
    episodes: usize,
    js: f64,
    sym_kl: f64,
    w1: f64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    smoothing_lambda: f64,
    units: &'static str,
    /// Pairwise diversity among episodes of the same length.
    diversity: Vec<DiversityGroup>,
    /// Mean selection-time entropy per episode.
    selection_entropy: BTreeMap<String, f64>,
    entropy_k: usize,
}

fn cmd_analyze(r: &Resolved, args: &EvalArgs) -> Result<()> {
    use rayon::prelude::*;
    let mut m = begin(r, "analyze", args)?;
    let episodes = load_or_generate(&r.cfg, args.data.as_deref(), "eval-data")?;
    let params = load_or_init(&r.cfg, args.checkpoint.as_deref())?;
    let a = &r.cfg.analysis;
    let t_prime = r.cfg.analysis_t_prime();
    let pdfs: Vec<analysis::SelectionPdf> = episodes
        .par_iter()
        .map(|ep| analysis::estimate_selection_pdf(&params, ep, t_prime, a.n_runs, r.cfg.seed))
        .collect::<Result<_>>()?;
    let mut by_len: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for p in &pdfs {
        by_len.entry(p.p.len()).or_default().push(p.p.clone());
    }
    let mut diversity = Vec::new();
    for (frames, group) in &by_len {
        if group.len() >= 2 {
            let d = pairwise_diversity(group)?;
            diversity.push(DiversityGroup {
                frames: *frames,
                episodes: group.len(),
                js: d.js,
                sym_kl: d.sym_kl,
                w1: d.w1,
            });
        }
    }
    let entropies: Vec<f64> = if t_prime > a.entropy_k {
        episodes
            .par_iter()
            .map(|ep| selection_time_entropy(&params, ep, t_prime, a.n_runs, a.entropy_k, r.cfg.seed))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let report = AnalyzeReport {
        smoothing_lambda: analysis::SMOOTHING_LAMBDA,
        units: "nats",
        diversity,
        selection_entropy: episodes.iter().map(|e| e.id.clone()).zip(entropies).collect(),
        entropy_k: a.entropy_k,
    };
    let reports = r.out_dir.join("reports");
    let pdf_path = reports.join("pdfs.json");
    let div_path = reports.join("diversity.json");
    write_json(&pdf_path, &pdfs)?;
    write_json(&div_path, &report)?;
    m.add(&pdf_path)?;
    m.add(&div_path)?;
    if a.plot_data {
        let p = reports.join("pdfs.dat");
        write_text(&p, &pdf_plot_data(&pdfs))?;
        m.add(&p)?;
    }
    finish(r, m)
}

#[derive(Serialize)]
struct NiahReport<'a> {
    policy: &'a NiahGrid,
    uniform: &'a NiahGrid,
    ratio: &'a NiahGrid,
}

fn cmd_niah(r: &Resolved, args: &EvalArgs) -> Result<()> {
    let mut m = begin(r, "niah", args)?;
    let params = load_or_init(&r.cfg, args.checkpoint.as_deref())?;
    let a = &r.cfg.analysis;
    let env = EnvConfig {
        n_needle: 1,
        needle_window: None,
        frame_blind_fraction: 0.0,
        ..r.cfg.env.clone()
    };
    let seed = r.cfg.seed;
    let grid = vniah_sweep(
        &params,
        |t, needle| gen_episode_with_needles(&EnvConfig { t, ..env.clone() }, seed, &[needle]),
        &a.frame_counts,
        &a.positions,
        SamplingOptions {
            t_prime: r.cfg.analysis_t_prime(),
            n_runs: a.n_runs,
            seed,
        },
    )?;
    let uniform = NiahGrid::uniform(&a.frame_counts, &a.positions);
    let ratio = grid.ratio_to(&uniform)?;
    let reports = r.out_dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    let csv_path = reports.join("niah.csv");
    let ratio_path = reports.join("niah-ratio.csv");
    let json_path = reports.join("niah.json");
    analysis::write_grid_csv(&csv_path, &grid)?;
    analysis::write_grid_csv(&ratio_path, &ratio)?;
    write_json(
        &json_path,
        &NiahReport {
            policy: &grid,
            uniform: &uniform,
            ratio: &ratio,
        },
    )?;
    for p in [&csv_path, &ratio_path, &json_path] {
        m.add(p)?;
    }
    if a.plot_data {
        let p = reports.join("niah.dat");
        write_text(&p, &grid_plot_data(&grid))?;
        m.add(&p)?;
    }
    finish(r, m)
}

fn cmd_bins(r: &Resolved, args: &EvalArgs) -> Result<()> {
    let mut m = begin(r, "bins", args)?;
    let episodes = load_or_generate(&r.cfg, args.data.as_deref(), "eval-data")?;
    let params = load_or_init(&r.cfg, args.checkpoint.as_deref())?;
    let oracle = make_oracle(&r.cfg)?;
    let a = &r.cfg.analysis;
    let table = likelihood_bins_eval(
        &params,
        &episodes,
        oracle.as_ref(),
        &a.ks,
        a.subsets_per_bin,
        SamplingOptions {
            t_prime: r.cfg.analysis_t_prime(),
            n_runs: a.n_runs,
            seed: r.cfg.seed,
        },
    )?;
    let reports = r.out_dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    let csv_path = reports.join("bins.csv");
    let json_path = reports.join("bins.json");
    analysis::write_bins_csv(&csv_path, &table)?;
    write_json(&json_path, &table)?;
    m.add(&csv_path)?;
    m.add(&json_path)?;
    if a.plot_data {
        let p = reports.join("bins.dat");
        write_text(&p, &analysis::bins_plot_data(&table, &a.ks))?;
        m.add(&p)?;
    }
    finish(r, m)
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(e) = &cli.endpoint {
        let base = cfg.service.take().unwrap_or_default();
        cfg.service = Some(ClientConfig {
            endpoint: e.clone(),
            ..base
        });
    }
    let default_dir = |out: &Option<PathBuf>, name: &str| {
        out.as_ref()
            .and_then(|p| p.parent())
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(name))
    };
    let out_dir = match &cli.command {
        Command::Gen(a) => {
            apply_env(&mut cfg, &a.env);
            default_dir(&a.out, ".")
        }
        Command::Filter(a) => {
            if let Some(t) = a.tau {
                cfg.filter.tau = t;
            }
            if let Some(k) = a.probe_k {
                cfg.filter.probe_k = k;
            }
            default_dir(&a.out, ".")
        }
        Command::Train(a) => {
            apply_train(&mut cfg, a);
            PathBuf::from("run-train")
        }
        Command::Analyze(a) => {
            apply_eval(&mut cfg, a);
            PathBuf::from("run-analyze")
        }
        Command::Niah(a) => {
            apply_eval(&mut cfg, a);
            PathBuf::from("run-niah")
        }
        Command::Bins(a) => {
            apply_eval(&mut cfg, a);
            PathBuf::from("run-bins")
        }
    };
    cfg.train.seed = cfg.seed;
    // Fresh parameters read the env widths.
    cfg.train.dims.d_in = cfg.env.d_in;
    cfg.train.dims.d_q = cfg.env.d_q;
    cfg.env.validate()?;
    cfg.oracle.validate()?;
    if let Some(s) = &cfg.service {
        s.validate()?;
    }
    if cfg.episodes == 0 {
        return Err(invalid_config("episodes must be >= 1"));
    }
    if let Command::Train(_) = cli.command {
        cfg.train.validate()?;
    }
    Ok(Resolved {
        cfg,
        out_dir: cli.out_dir.clone().unwrap_or(out_dir),
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut r = resolve(cli)?;
    let data_path = match &cli.command {
        Command::Train(a) => a.data.clone(),
        Command::Analyze(a) | Command::Bins(a) => a.data.clone(),
        _ => None,
    };
    if let Some(p) = data_path {
        let episodes = read_jsonl(&p)?;
        sync_dims(&mut r.cfg, &episodes)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(r.cfg.workers)
        .build()
        .map_err(|e| invalid_config(format!("worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Gen(a) => cmd_gen(&r, a),
        Command::Filter(a) => cmd_filter(&r, a),
        Command::Train(a) => cmd_train(&r, a),
        Command::Analyze(a) => cmd_analyze(&r, a),
        Command::Niah(a) => cmd_niah(&r, a),
        Command::Bins(a) => cmd_bins(&r, a),
    })
}

/// Run the command line `argv` (including the program name); returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_flags_merge_with_flags_winning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 3\n[env]\nT = 40\nn_needle = 2\n[train]\nbatch_size = 4\nlr_heads = 0.5\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "refocus",
            "--config",
            path.to_str().unwrap(),
            "train",
            "--T",
            "48",
            "--steps",
            "5",
        ])
        .unwrap();
        let r = resolve(&cli).unwrap();
        assert_eq!(r.cfg.env.t, 48);
        assert_eq!(r.cfg.env.n_needle, 2);
        assert_eq!(r.cfg.train.batch_size, 4);
        assert_eq!(r.cfg.train.lr_heads, 0.5);
        assert_eq!(r.cfg.train.total_steps, 5);
        assert_eq!(r.cfg.train.seed, 3);
        assert_eq!(r.out_dir, PathBuf::from("run-train"));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[env]\nframes = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["refocus", "gen", "--bogus"]), 1);
        assert_eq!(run(["refocus", "frobnicate"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.jsonl");
        assert_eq!(run(["refocus", "gen", "--T", "1", "--out", out.to_str().unwrap()]), 1);
        let missing = dir.path().join("missing.jsonl");
        assert_eq!(
            run(["refocus", "filter", "--in", missing.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]),
            2
        );
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let t = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&t).unwrap(), cfg);
    }
}
