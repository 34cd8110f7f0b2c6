//! Experiment configuration, sweep execution and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{self, LossKind, TdMode, TrainConfig};
use crate::env::{optimal_return, random_policy_return, tabular_value_iteration, GridConfig};
use crate::error::{Error, Result};
use crate::eval::{self, AggregateReport, NonstationarityConfig, RunLog};
use crate::net::{ce_loss_and_grad, Head, Network};
use crate::oracle;
use crate::projection::{self, HlGaussParams};
use crate::replay::{collect_offline, CollectionPolicy, OfflineDataset};
use crate::support::{ProbVector, Support};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Online,
    OfflineQl,
    OfflineSarsa,
    NoisyRewardSweep,
    StickyToggle,
    SigmaSweep,
    Nonstationarity,
    LinearProbe,
    MseSoftmaxAblation,
}

impl ExperimentKind {
    fn needs_env(self) -> bool {
        self != ExperimentKind::Nonstationarity
    }

    fn is_offline(self) -> bool {
        !matches!(
            self,
            ExperimentKind::Online | ExperimentKind::StickyToggle | ExperimentKind::Nonstationarity
        )
    }

    fn default_loss_kinds(self) -> Vec<LossKind> {
        match self {
            ExperimentKind::SigmaSweep => vec![LossKind::HlGauss],
            ExperimentKind::MseSoftmaxAblation => vec![LossKind::Mse, LossKind::MseSoftmax, LossKind::HlGauss],
            ExperimentKind::Nonstationarity => vec![LossKind::Mse, LossKind::TwoHot, LossKind::HlGauss],
            _ => vec![LossKind::HlGauss, LossKind::Mse],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    /// Epsilon-greedy around the value-iteration optimum.
    EpsilonGreedy,
}

/// Where offline transitions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load this file for every run instead of collecting.
    pub path: Option<PathBuf>,
    pub policy: PolicyKind,
    pub epsilon: f64,
    pub episodes: usize,
    /// Collection seed; each run adds its own seed to it.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            policy: PolicyKind::EpsilonGreedy,
            epsilon: 0.5,
            episodes: 100,
            seed: 100,
        }
    }
}

/// Sweep axes. Empty lists take the experiment kind's default grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub reward_noise: Vec<f64>,
    pub sticky: Vec<f64>,
    pub bins: Vec<usize>,
    pub smoothing_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub loss_kinds: Option<Vec<LossKind>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// TD mode for the offline kinds that do not fix it.
    #[serde(default = "default_mode")]
    pub offline_mode: TdMode,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub report_seed: u64,
    /// Episodes per start cell for the random-policy anchor.
    #[serde(default = "default_anchor_episodes")]
    pub anchor_episodes: usize,
    #[serde(default)]
    pub env: Option<GridConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub nonstationarity: NonstationarityConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_mode() -> TdMode {
    TdMode::QLearning
}
fn default_resamples() -> usize {
    2000
}
fn default_confidence() -> f64 {
    0.95
}
fn default_anchor_episodes() -> usize {
    20
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::ConfigValidation {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Parse TOML text; syntax and unknown-key errors carry a 1-based line.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::ConfigParse {
            line,
            message: e.message().to_string(),
        }
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

impl ExperimentConfig {
    /// Fill kind-dependent defaults and validate.
    fn resolve(&mut self) -> Result<()> {
        let kind = self.kind;
        if self.loss_kinds.is_none() {
            self.loss_kinds = Some(kind.default_loss_kinds());
        }
        match kind {
            ExperimentKind::NoisyRewardSweep if self.sweep.reward_noise.is_empty() => {
                self.sweep.reward_noise = vec![0.1, 0.3, 1.0];
            }
            ExperimentKind::StickyToggle if self.sweep.sticky.is_empty() => {
                self.sweep.sticky = vec![0.0, 0.25];
            }
            ExperimentKind::SigmaSweep => {
                if self.sweep.bins.is_empty() {
                    self.sweep.bins = vec![21, 51, 101, 201];
                }
                if self.sweep.smoothing_ratios.is_empty() {
                    self.sweep.smoothing_ratios = vec![0.25, 0.5, 0.75, 1.0, 2.0];
                }
            }
            _ => {}
        }
        if kind.is_offline() && self.data.is_none() {
            self.data = Some(DataConfig::default());
        }
        self.validate()
    }

    pub fn loss_kinds(&self) -> &[LossKind] {
        self.loss_kinds.as_deref().unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        let kinds = self.loss_kinds();
        if kinds.is_empty() {
            return Err(invalid("loss_kinds", "at least one loss kind is required"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        if self.resamples == 0 {
            return Err(invalid("resamples", "must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(invalid("confidence", "must lie in (0, 1)"));
        }
        if self.anchor_episodes == 0 {
            return Err(invalid("anchor_episodes", "must be positive"));
        }
        if self.kind.needs_env() {
            let env = self.env.as_ref().ok_or_else(|| invalid("env", "missing [env] section"))?;
            env.validate().map_err(|e| match e {
                Error::InvalidParameter { name, reason } => invalid(&format!("env.{name}"), reason),
                other => other,
            })?;
            for &k in kinds {
                let t = TrainConfig {
                    loss_kind: k,
                    ..self.train.clone()
                };
                t.validate().map_err(|e| match e {
                    Error::ConfigValidation { field, reason } => invalid(&format!("train.{field}"), reason),
                    other => other,
                })?;
            }
        }
        if self.sweep.reward_noise.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid("sweep.reward_noise", "values must be finite and non-negative"));
        }
        if self.sweep.sticky.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(invalid("sweep.sticky", "probabilities must lie in [0, 1]"));
        }
        if self.sweep.bins.iter().any(|&b| b < 2) {
            return Err(invalid("sweep.bins", "need at least 2 bins"));
        }
        if self.sweep.smoothing_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(invalid("sweep.smoothing_ratios", "must be positive"));
        }
        match self.kind {
            ExperimentKind::SigmaSweep => {
                if kinds.iter().any(|&k| k != LossKind::HlGauss) {
                    return Err(invalid("loss_kinds", "sigma_sweep only applies to hl_gauss"));
                }
            }
            ExperimentKind::Nonstationarity => {
                if kinds.contains(&LossKind::C51) {
                    return Err(invalid("loss_kinds", "c51 has no regression form"));
                }
                let n = &self.nonstationarity;
                if n.biases.is_empty() {
                    return Err(invalid("nonstationarity.biases", "at least one bias is required"));
                }
                if n.steps_per_phase == 0 || n.batch_size == 0 {
                    return Err(invalid("nonstationarity.steps_per_phase/batch_size", "must be positive"));
                }
                if n.learning_rate.is_nan() || n.learning_rate <= 0.0 {
                    return Err(invalid("nonstationarity.learning_rate", "must be positive"));
                }
                Support::new(n.v_min, n.v_max, n.bins)
                    .map_err(|e| invalid("nonstationarity.v_min/v_max/bins", e.to_string()))?;
                let lo = n.biases.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
                let hi = n.biases.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
                if lo < n.v_min || hi > n.v_max {
                    return Err(invalid("nonstationarity.v_min/v_max", "support must cover every bias +-1"));
                }
            }
            _ => {}
        }
        if let Some(d) = &self.data {
            if !self.kind.is_offline() {
                return Err(invalid("data", "only offline experiment kinds use a dataset"));
            }
            if let Some(p) = &d.path {
                if !p.exists() {
                    return Err(invalid("data.path", format!("{} does not exist", p.display())));
                }
                if self.kind == ExperimentKind::NoisyRewardSweep {
                    return Err(invalid("data.path", "noisy_reward_sweep collects one dataset per noise level"));
                }
            }
            if d.episodes == 0 {
                return Err(invalid("data.episodes", "must be positive"));
            }
            if !(0.0..=1.0).contains(&d.epsilon) {
                return Err(invalid("data.epsilon", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Procedure {
    Online,
    Offline(TdMode),
    Probe(TdMode),
    Synthetic,
}

/// One independent seeded run of the sweep.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub cell: String,
    pub loss_kind: LossKind,
    pub seed: u64,
    env: Option<GridConfig>,
    train: TrainConfig,
    procedure: Procedure,
}

impl RunSpec {
    pub fn file_stem(&self) -> String {
        if self.cell.is_empty() {
            format!("{}_seed{}", self.loss_kind, self.seed)
        } else {
            format!("{}_{}_seed{}", self.cell, self.loss_kind, self.seed)
        }
    }
}

/// Cross product of sweep cells, loss kinds and seeds, in a fixed order.
pub fn plan_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let base_env = cfg.env.clone();
    let mut cells: Vec<(String, Option<GridConfig>, TrainConfig)> = Vec::new();
    match cfg.kind {
        ExperimentKind::NoisyRewardSweep => {
            for &eta in &cfg.sweep.reward_noise {
                let env = base_env.clone().map(|e| GridConfig {
                    reward_noise: eta,
                    ..e
                });
                cells.push((format!("eta{eta}"), env, cfg.train.clone()));
            }
        }
        ExperimentKind::StickyToggle => {
            for &p in &cfg.sweep.sticky {
                let env = base_env.clone().map(|e| GridConfig { sticky_prob: p, ..e });
                cells.push((format!("sticky{p}"), env, cfg.train.clone()));
            }
        }
        ExperimentKind::SigmaSweep => {
            for &bins in &cfg.sweep.bins {
                for &ratio in &cfg.sweep.smoothing_ratios {
                    let train = TrainConfig {
                        bins,
                        smoothing_ratio: ratio,
                        ..cfg.train.clone()
                    };
                    cells.push((format!("bins{bins}_ratio{ratio}"), base_env.clone(), train));
                }
            }
        }
        _ => cells.push((String::new(), base_env, cfg.train.clone())),
    }
    let procedure = match cfg.kind {
        ExperimentKind::Online | ExperimentKind::StickyToggle => Procedure::Online,
        ExperimentKind::OfflineSarsa => Procedure::Offline(TdMode::Sarsa),
        ExperimentKind::OfflineQl => Procedure::Offline(TdMode::QLearning),
        ExperimentKind::NoisyRewardSweep | ExperimentKind::SigmaSweep | ExperimentKind::MseSoftmaxAblation => {
            Procedure::Offline(cfg.offline_mode)
        }
        ExperimentKind::LinearProbe => Procedure::Probe(cfg.offline_mode),
        ExperimentKind::Nonstationarity => Procedure::Synthetic,
    };
    let mut runs = Vec::new();
    for (cell, env, train) in &cells {
        for &loss_kind in cfg.loss_kinds() {
            for &seed in &cfg.seeds {
                runs.push(RunSpec {
                    cell: cell.clone(),
                    loss_kind,
                    seed,
                    env: env.clone(),
                    train: TrainConfig {
                        loss_kind,
                        seed,
                        ..train.clone()
                    },
                    procedure,
                });
            }
        }
    }
    runs
}

/// The dataset an offline run trains on.
pub fn dataset_for(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<OfflineDataset> {
    let data = cfg.data.as_ref().ok_or_else(|| invalid("data", "missing [data] section"))?;
    if let Some(p) = &data.path {
        return OfflineDataset::load(p);
    }
    let env = spec.env.as_ref().ok_or_else(|| invalid("env", "missing [env] section"))?;
    let policy = match data.policy {
        PolicyKind::Uniform => CollectionPolicy::Uniform,
        PolicyKind::EpsilonGreedy => {
            let det = GridConfig {
                sticky_prob: 0.0,
                reward_noise: 0.0,
                ..env.clone()
            };
            CollectionPolicy::EpsilonGreedy {
                q: tabular_value_iteration(&det, cfg.train.gamma)?,
                epsilon: data.epsilon,
            }
        }
    };
    collect_offline(env, &policy, data.episodes, data.seed.wrapping_add(spec.seed))
}

/// Metric aggregated across runs.
pub fn report_metric(cfg: &ExperimentConfig) -> String {
    match cfg.kind {
        ExperimentKind::Nonstationarity => {
            let last = cfg.nonstationarity.biases.last().copied().unwrap_or(0.0);
            format!("final_mse_b{last}")
        }
        _ => "final_return".into(),
    }
}

/// Random-policy and optimal returns used to normalize returns.
pub fn anchors(cfg: &ExperimentConfig) -> Result<Option<(f64, f64)>> {
    match &cfg.env {
        Some(env) if cfg.kind.needs_env() => {
            let random = random_policy_return(env, cfg.anchor_episodes, cfg.report_seed)?;
            let optimal = optimal_return(env, cfg.train.gamma)?;
            Ok(Some((random, optimal)))
        }
        _ => Ok(None),
    }
}

/// Execute one run and return its log.
pub fn execute(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunLog> {
    let env = || spec.env.as_ref().ok_or_else(|| invalid("env", "missing [env] section"));
    let mut log = match spec.procedure {
        Procedure::Online => agent::run_online(env()?, &spec.train)?.log,
        Procedure::Offline(mode) => {
            let data = dataset_for(cfg, spec)?;
            agent::run_offline(&data, env()?, &spec.train, mode)?.log
        }
        Procedure::Probe(mode) => {
            let data = dataset_for(cfg, spec)?;
            let backbone = agent::run_offline(&data, env()?, &spec.train, mode)?;
            let probe = eval::linear_probe(&backbone.network, &data, env()?, &spec.train, mode)?;
            let mut log = probe.run.log;
            if let Some(r) = backbone.log.final_value("final_return") {
                log.set_final("backbone_return", spec.train.total_steps, r);
            }
            log
        }
        Procedure::Synthetic => eval::nonstationarity_run(&cfg.nonstationarity, spec.loss_kind, spec.seed)?.log,
    };
    if !spec.cell.is_empty() {
        log.run_id = format!("{}_{}", spec.cell, log.run_id);
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: String,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub cell: String,
    pub error: String,
}

/// What a finished experiment produced.
#[derive(Debug)]
pub struct Outcome {
    pub report: Option<AggregateReport>,
    pub run_files: Vec<PathBuf>,
    pub failures: Vec<FailedRun>,
}

const RUNS_DIR: &str = "runs";
const DATASETS_DIR: &str = "datasets";
const REPORT_CSV: &str = "report.csv";
const REPORT_TXT: &str = "report.txt";
const MANIFEST: &str = "failures.json";

fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if occupied && !force {
        return Err(Error::OutputExists(dir.display().to_string()));
    }
    for sub in [RUNS_DIR, DATASETS_DIR] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p)?;
        }
    }
    for f in [REPORT_CSV, REPORT_TXT, MANIFEST] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p)?;
        }
    }
    fs::create_dir_all(dir.join(RUNS_DIR))?;
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter {
            name: "jobs",
            reason: e.to_string(),
        })
}

/// Run the full sweep, writing one CSV per run, the aggregate report and,
/// when any run fails, a failure manifest.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool, jobs: usize) -> Result<Outcome> {
    let dir = &cfg.output_dir;
    prepare_output(dir, force)?;
    let hash = cfg.hash();
    let metric = report_metric(cfg);
    let anchors = anchors(cfg)?;
    let runs = plan_runs(cfg);
    log::info!("{} runs, config {}", runs.len(), &hash[..12]);
    let results: Vec<Result<RunLog>> = thread_pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|spec| {
                let r = execute(cfg, spec);
                match &r {
                    Ok(_) => log::info!("finished {}", spec.file_stem()),
                    Err(e) => log::warn!("{} failed: {e}", spec.file_stem()),
                }
                r
            })
            .collect()
    });

    let mut groups: BTreeMap<(LossKind, String), Vec<f64>> = BTreeMap::new();
    let mut run_files = Vec::new();
    let mut failures = Vec::new();
    for (spec, res) in runs.iter().zip(results) {
        match res {
            Ok(log) => {
                let path = dir.join(RUNS_DIR).join(format!("{}.csv", spec.file_stem()));
                let meta = run_meta(cfg, spec, &hash, &metric, anchors);
                let meta_ref: Vec<(&str, String)> = meta.iter().map(|(k, v)| (*k, v.clone())).collect();
                let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
                log.write_csv(&mut w, &meta_ref)?;
                w.flush()?;
                run_files.push(path);
                match log.final_value(&metric) {
                    Some(v) => groups.entry((spec.loss_kind, spec.cell.clone())).or_default().push(v),
                    None => failures.push(FailedRun {
                        run: spec.file_stem(),
                        loss_kind: spec.loss_kind,
                        seed: spec.seed,
                        cell: spec.cell.clone(),
                        error: format!("no final {metric}"),
                    }),
                }
            }
            Err(e) => failures.push(FailedRun {
                run: spec.file_stem(),
                loss_kind: spec.loss_kind,
                seed: spec.seed,
                cell: spec.cell.clone(),
                error: e.to_string(),
            }),
        }
    }
    let report = if groups.is_empty() {
        None
    } else {
        let report = AggregateReport::build(&metric, &groups, anchors, cfg.resamples, cfg.confidence, cfg.report_seed)?;
        write_report(dir, &report)?;
        Some(report)
    };
    if !failures.is_empty() {
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&failures)?)?;
    }
    Ok(Outcome {
        report,
        run_files,
        failures,
    })
}

fn run_meta(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    hash: &str,
    metric: &str,
    anchors: Option<(f64, f64)>,
) -> Vec<(&'static str, String)> {
    let mut meta = vec![
        ("config_hash", hash.to_string()),
        ("experiment", serde_json::to_string(&cfg.kind).unwrap().trim_matches('"').to_string()),
        ("cell", spec.cell.clone()),
        ("metric", metric.to_string()),
        ("resamples", cfg.resamples.to_string()),
        ("confidence", cfg.confidence.to_string()),
        ("report_seed", cfg.report_seed.to_string()),
    ];
    if let Some((random, optimal)) = anchors {
        meta.push(("random_return", random.to_string()));
        meta.push(("optimal_return", optimal.to_string()));
    }
    meta
}

fn write_report(dir: &Path, report: &AggregateReport) -> Result<()> {
    fs::write(dir.join(REPORT_CSV), report.to_csv())?;
    fs::write(dir.join(REPORT_TXT), report.to_table())?;
    Ok(())
}

/// Rebuild the aggregate report of a finished experiment directory from
/// its run CSVs.
pub fn report_dir(dir: &Path) -> Result<AggregateReport> {
    let runs = dir.join(RUNS_DIR);
    let unreadable = |e: std::io::Error| Error::Format {
        path: runs.display().to_string(),
        reason: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(unreadable)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(unreadable)?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "csv"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("run CSV files"));
    }
    let mut groups: BTreeMap<(LossKind, String), Vec<f64>> = BTreeMap::new();
    let mut common: Option<BTreeMap<String, String>> = None;
    for p in &paths {
        let origin = p.display().to_string();
        let (log, meta) = RunLog::read_csv(BufReader::new(fs::File::open(p)?), &origin)?;
        let get = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| Error::Format {
                path: origin.clone(),
                reason: format!("missing header {k}"),
            })
        };
        let metric = get("metric")?;
        let value = log.final_value(&metric).ok_or_else(|| Error::Format {
            path: origin.clone(),
            reason: format!("no final {metric}"),
        })?;
        groups.entry((log.loss_kind, get("cell")?)).or_default().push(value);
        match &common {
            None => common = Some(meta),
            Some(c) => {
                for k in ["config_hash", "metric"] {
                    if c.get(k) != meta.get(k) {
                        return Err(Error::Format {
                            path: origin,
                            reason: format!("header {k} differs from other runs"),
                        });
                    }
                }
            }
        }
    }
    let meta = common.expect("at least one run");
    let num = |k: &str| -> Result<Option<f64>> {
        meta.get(k)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Format {
                    path: dir.display().to_string(),
                    reason: format!("{k}: {e}"),
                })
            })
            .transpose()
    };
    let anchors = match (num("random_return")?, num("optimal_return")?) {
        (Some(r), Some(o)) => Some((r, o)),
        _ => None,
    };
    let resamples = num("resamples")?.unwrap_or(2000.0) as usize;
    let confidence = num("confidence")?.unwrap_or(0.95);
    let seed = num("report_seed")?.unwrap_or(0.0) as u64;
    let report = AggregateReport::build(&meta["metric"], &groups, anchors, resamples, confidence, seed)?;
    write_report(dir, &report)?;
    Ok(report)
}

/// Collect and save the dataset of every offline run of the sweep.
pub fn collect_datasets(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>> {
    if !cfg.kind.is_offline() {
        return Err(invalid("kind", "collect applies to offline experiment kinds"));
    }
    if cfg.data.as_ref().is_some_and(|d| d.path.is_some()) {
        return Err(invalid("data.path", "dataset is loaded from a file; nothing to collect"));
    }
    let dir = cfg.output_dir.join(DATASETS_DIR);
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        if !force {
            return Err(Error::OutputExists(dir.display().to_string()));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut seen = BTreeMap::new();
    for spec in plan_runs(cfg) {
        // Datasets do not depend on the loss kind.
        let key = (spec.cell.clone(), spec.seed);
        if seen.contains_key(&key) {
            continue;
        }
        let data = dataset_for(cfg, &spec)?;
        let name = if spec.cell.is_empty() {
            format!("seed{}.jsonl", spec.seed)
        } else {
            format!("{}_seed{}.jsonl", spec.cell, spec.seed)
        };
        let path = dir.join(name);
        data.save(&path)?;
        seen.insert(key, path);
    }
    Ok(seen.into_values().collect())
}

/// Outcome of one built-in check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Compare the production kernels against the reference implementations
/// on random inputs.
pub fn verify(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let s = Support::new(-10.0, 10.0, 51)?;
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let y = rng.random_range(-12.0..12.0);
        let m = s.mean(&projection::two_hot(y, &s)?)?;
        worst = worst.max((m - s.clip_to_centers(y)).abs());
    }
    out.push(check("two_hot mean equals clipped target", worst <= 1e-9, format!("max error {worst:.2e}")));

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let bins = [21, 51, 101, 201][rng.random_range(0..4)];
        let s = Support::new(-10.0, 10.0, bins)?;
        let ratio = rng.random_range(0.1..2.0);
        let params = HlGaussParams::from_ratio(ratio, &s)?;
        let y = rng.random_range(-10.0..10.0);
        let p = projection::hl_gauss(y, &params, &s)?;
        let q = oracle::hl_gauss_quadrature(y, params.sigma(), s.edges());
        for (a, b) in p.probs().iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(check("hl_gauss matches quadrature", worst <= 1e-10, format!("max error {worst:.2e}")));

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        let atoms: Vec<(f64, f64)> = w.iter().map(|&wi| (rng.random_range(-14.0..14.0), wi / total)).collect();
        let p = projection::c51_project(&atoms, &s)?;
        let q = oracle::c51_double_loop(&atoms, s.centers());
        for (a, b) in p.probs().iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(check("c51 projection matches double loop", worst <= 1e-12, format!("max error {worst:.2e}")));

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let net = Network::new(3, &[5], 2, Head::Categorical { atoms: 7 }, &mut rng)?;
        let small = Support::new(-1.0, 1.0, 7)?;
        let raw: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let target = ProbVector::new(raw.iter().map(|v| v / total).collect(), &small)?;
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out_row = net.forward(&x)?;
        let (_, g) = ce_loss_and_grad(&out_row[..7], &target)?;
        let mut up = vec![0.0; out_row.len()];
        up[..7].copy_from_slice(&g);
        let analytic = net.backward_single(&x, &up)?.flat();
        let mut probe = net.clone();
        let params = net.params_flat();
        let mut f = |p: &[f64]| {
            probe.set_params_flat(p).expect("same shape");
            let o = probe.forward(&x).expect("finite");
            ce_loss_and_grad(&o[..7], &target).expect("finite").0
        };
        let numeric = oracle::central_difference(&mut f, &params, 1e-6);
        for (a, b) in analytic.iter().zip(&numeric) {
            worst = worst.max(oracle::relative_error(*a, *b));
        }
    }
    out.push(check("cross-entropy backprop matches finite differences", worst < 1e-4, format!("max relative error {worst:.2e}")));

    let mut worst: f64 = 0.0;
    let mut ci_worst: f64 = 0.0;
    for i in 0..20 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        worst = worst.max((eval::iqm(&v)? - oracle::iqm_brute(&v)).abs());
        if i < 5 {
            let m: Vec<Vec<f64>> = (0..3).map(|_| (0..10).map(|_| rng.random::<f64>()).collect()).collect();
            let (lo, hi) = eval::stratified_bootstrap_ci(&m, 20_000, 0.95, 1)?;
            let (blo, bhi) = oracle::bootstrap_ci_brute(&m, 20_000, 0.95, 2);
            ci_worst = ci_worst.max((lo - blo).abs()).max((hi - bhi).abs());
        }
    }
    out.push(check("iqm matches brute force", worst == 0.0, format!("max error {worst:.2e}")));
    out.push(check("bootstrap interval matches reference", ci_worst <= 0.01, format!("max endpoint gap {ci_worst:.4}")));

    let grid = GridConfig::default();
    let q = tabular_value_iteration(&grid, 0.99)?;
    let residual = q.bellman_residual(0.99);
    out.push(check("value iteration is a Bellman fixed point", residual <= 1e-10, format!("residual {residual:.2e}")));
    Ok(out)
}

/// Render check results, one line each.
pub fn format_checks(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        writeln!(s, "[{tag}] {}: {}", r.name, r.detail).unwrap();
    }
    s
}

/// Summary line per aggregate row for the terminal.
pub fn summarize(outcome: &Outcome) -> String {
    let mut s = String::new();
    if let Some(r) = &outcome.report {
        s.push_str(&r.to_table());
    }
    writeln!(s, "{} run file(s) written", outcome.run_files.len()).unwrap();
    if !outcome.failures.is_empty() {
        writeln!(s, "{} run(s) failed; see {MANIFEST}", outcome.failures.len()).unwrap();
    }
    s
}

/// Exit status for an error surfaced by a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigParse { .. } | Error::ConfigValidation { .. } | Error::OutputExists(_) => 1,
        _ => 2,
    }
}
