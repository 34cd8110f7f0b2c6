//! Run logs, aggregate statistics, linear probes and the synthetic
//! non-stationarity benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, LossKind, RunResult, TdMode, TrainConfig};
use crate::env::{GridConfig, SyntheticConfig, SyntheticTask, Transition};
use crate::error::{Error, Result};
use crate::net::{ce_grad_into, softmax, AdamState, Head, Network};
use crate::projection::{self, HlGaussParams};
use crate::replay::{DatasetMeta, OfflineDataset};
use crate::support::Support;

/// Metric time series of one training run plus named final values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub run_id: String,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub env_tag: String,
    series: BTreeMap<String, Vec<(u64, f64)>>,
    finals: BTreeMap<String, (u64, f64)>,
}

impl RunLog {
    pub fn new(run_id: String, loss_kind: LossKind, seed: u64, env_tag: String) -> Self {
        Self {
            run_id,
            loss_kind,
            seed,
            env_tag,
            series: BTreeMap::new(),
            finals: BTreeMap::new(),
        }
    }

    /// Append to a series; steps must strictly increase.
    pub fn push(&mut self, metric: &str, step: u64, value: f64) -> Result<()> {
        let s = self.series.entry(metric.to_string()).or_default();
        if let Some(&(last, _)) = s.last() {
            if step <= last {
                return Err(Error::InvalidParameter {
                    name: "step",
                    reason: format!("{metric}: step {step} after {last}"),
                });
            }
        }
        s.push((step, value));
        Ok(())
    }

    pub fn series(&self, metric: &str) -> &[(u64, f64)] {
        self.series.get(metric).map_or(&[], Vec::as_slice)
    }

    pub fn metrics(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn set_final(&mut self, name: &str, step: u64, value: f64) {
        self.finals.insert(name.to_string(), (step, value));
    }

    pub fn final_value(&self, name: &str) -> Option<f64> {
        self.finals.get(name).map(|&(_, v)| v)
    }

    pub fn finals(&self) -> impl Iterator<Item = (&str, f64)> {
        self.finals.iter().map(|(k, &(_, v))| (k.as_str(), v))
    }

    /// `step,metric,value` rows after `# key: value` header comments.
    /// Final values are rows whose metric is prefixed with `final:`.
    pub fn write_csv<W: Write>(&self, mut w: W, extra_meta: &[(&str, String)]) -> Result<()> {
        writeln!(w, "# run_id: {}", self.run_id)?;
        writeln!(w, "# loss_kind: {}", self.loss_kind)?;
        writeln!(w, "# seed: {}", self.seed)?;
        writeln!(w, "# env: {}", self.env_tag)?;
        for (k, v) in extra_meta {
            writeln!(w, "# {k}: {v}")?;
        }
        writeln!(w, "step,metric,value")?;
        for (metric, rows) in &self.series {
            for (step, value) in rows {
                writeln!(w, "{step},{metric},{value}")?;
            }
        }
        for (name, (step, value)) in &self.finals {
            writeln!(w, "{step},final:{name},{value}")?;
        }
        Ok(())
    }

    /// Inverse of [`RunLog::write_csv`]; also returns the header entries.
    pub fn read_csv<R: BufRead>(r: R, origin: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let fmt = |line: usize, reason: String| Error::Format {
            path: origin.to_string(),
            reason: format!("line {line}: {reason}"),
        };
        let mut meta = BTreeMap::new();
        let mut log: Option<RunLog> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once(": ").ok_or_else(|| fmt(n, "bad header".into()))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            if line == "step,metric,value" {
                let get = |k: &str| meta.get(k).cloned().ok_or_else(|| fmt(n, format!("missing header {k}")));
                let kind: LossKind = get("loss_kind")?.parse()?;
                let seed = get("seed")?.parse().map_err(|e| fmt(n, format!("seed: {e}")))?;
                log = Some(RunLog::new(get("run_id")?, kind, seed, get("env")?));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let log = log.as_mut().ok_or_else(|| fmt(n, "row before column header".into()))?;
            let mut parts = line.splitn(3, ',');
            let (Some(step), Some(metric), Some(value)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(fmt(n, "expected step,metric,value".into()));
            };
            let step: u64 = step.parse().map_err(|e| fmt(n, format!("step: {e}")))?;
            let value: f64 = value.parse().map_err(|e| fmt(n, format!("value: {e}")))?;
            match metric.strip_prefix("final:") {
                Some(name) => log.set_final(name, step, value),
                None => log.push(metric, step, value).map_err(|e| fmt(n, e.to_string()))?,
            }
        }
        let log = log.ok_or_else(|| fmt(0, "no column header".into()))?;
        Ok((log, meta))
    }
}

/// Mean of the values left after dropping `floor(n / 4)` from each end of
/// the sorted list.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("iqm input"));
    }
    crate::error::ensure_finite(values, "iqm input")?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(trimmed_mean(&v))
}

fn trimmed_mean(sorted: &[f64]) -> f64 {
    let cut = sorted.len() / 4;
    let kept = &sorted[cut..sorted.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the pooled IQM, resampling seeds with
/// replacement independently inside each task (row of `scores`).
pub fn stratified_bootstrap_ci(
    scores: &[Vec<f64>],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("score matrix"));
    }
    if let Some(t) = scores.iter().position(|row| row.len() < 2) {
        return Err(Error::DegenerateStrata(format!(
            "task {t} has {} seed(s); need at least 2",
            scores[t].len()
        )));
    }
    if resamples == 0 {
        return Err(Error::InvalidParameter {
            name: "resamples",
            reason: "must be positive".into(),
        });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter {
            name: "confidence",
            reason: "must lie in (0, 1)".into(),
        });
    }
    for row in scores {
        crate::error::ensure_finite(row, "scores")?;
    }
    let total: usize = scores.iter().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pooled = Vec::with_capacity(total);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        pooled.clear();
        for row in scores {
            pooled.extend((0..row.len()).map(|_| row[rng.random_range(0..row.len())]));
        }
        pooled.sort_by(f64::total_cmp);
        stats.push(trimmed_mean(&pooled));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

/// `(return - random) / (optimal - random)`.
pub fn normalized_score(ret: f64, random: f64, optimal: f64) -> f64 {
    (ret - random) / (optimal - random)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub loss_kind: LossKind,
    /// Sweep cell label, empty when the experiment has no sweep axis.
    pub cell: String,
    pub runs: usize,
    pub mean: f64,
    pub iqm: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub metric: String,
    /// Anchors of the normalized score, when the metric is normalized.
    pub random_return: Option<f64>,
    pub optimal_return: Option<f64>,
    pub resamples: usize,
    pub confidence: f64,
    pub rows: Vec<AggregateRow>,
}

impl AggregateReport {
    /// One row per `(loss kind, cell)` group. Groups with a single run get
    /// a zero-width interval. The interval is widened to contain the point
    /// IQM when resampling noise leaves it just outside.
    pub fn build(
        metric: &str,
        groups: &BTreeMap<(LossKind, String), Vec<f64>>,
        anchors: Option<(f64, f64)>,
        resamples: usize,
        confidence: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for ((kind, cell), raw) in groups {
            let values: Vec<f64> = match anchors {
                Some((random, optimal)) => raw.iter().map(|&r| normalized_score(r, random, optimal)).collect(),
                None => raw.clone(),
            };
            let point = iqm(&values)?;
            let (lower, upper) = if values.len() >= 2 {
                stratified_bootstrap_ci(std::slice::from_ref(&values), resamples, confidence, seed)?
            } else {
                (point, point)
            };
            rows.push(AggregateRow {
                loss_kind: *kind,
                cell: cell.clone(),
                runs: values.len(),
                mean: values.iter().sum::<f64>() / values.len() as f64,
                iqm: point,
                lower: lower.min(point),
                upper: upper.max(point),
            });
        }
        Ok(Self {
            metric: metric.to_string(),
            random_return: anchors.map(|a| a.0),
            optimal_return: anchors.map(|a| a.1),
            resamples,
            confidence,
            rows,
        })
    }

    pub fn row(&self, kind: LossKind, cell: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.loss_kind == kind && r.cell == cell)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# metric: {}", self.metric).unwrap();
        if let (Some(r), Some(o)) = (self.random_return, self.optimal_return) {
            writeln!(s, "# normalization: random {r}, optimal {o}").unwrap();
        }
        writeln!(s, "# bootstrap: {} resamples, confidence {}", self.resamples, self.confidence).unwrap();
        writeln!(s, "loss_kind,cell,runs,mean,iqm,ci_lower,ci_upper").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.loss_kind, r.cell, r.runs, r.mean, r.iqm, r.lower, r.upper
            )
            .unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let score = if self.random_return.is_some() {
            format!("normalized {}", self.metric)
        } else {
            self.metric.clone()
        };
        writeln!(s, "{score}, IQM with {:.0}% bootstrap CI", self.confidence * 100.0).unwrap();
        let cell_w = self.rows.iter().map(|r| r.cell.len()).max().unwrap_or(0).max(4);
        writeln!(
            s,
            "{:<12} {:<cell_w$} {:>4} {:>10} {:>10} {:>22}",
            "loss", "cell", "runs", "mean", "iqm", "ci"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<12} {:<cell_w$} {:>4} {:>10.4} {:>10.4} {:>22}",
                r.loss_kind.name(),
                r.cell,
                r.runs,
                r.mean,
                r.iqm,
                format!("[{:.4}, {:.4}]", r.lower, r.upper)
            )
            .unwrap();
        }
        s
    }
}

/// Outcome of a linear probe.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub run: RunResult,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Train a fresh linear head on the frozen penultimate features of
/// `backbone` with the offline TD procedure of `cfg`. `cfg.hidden` is
/// ignored.
pub fn linear_probe(
    backbone: &Network,
    dataset: &OfflineDataset,
    env_cfg: &GridConfig,
    cfg: &TrainConfig,
    mode: TdMode,
) -> Result<ProbeResult> {
    let before = backbone.param_hash();
    let featurize = |s: &[f64]| -> Result<Vec<f64>> {
        let f = backbone.penultimate_features(s)?;
        crate::error::ensure_finite(&f, "probe features")?;
        Ok(f)
    };
    let mapped = dataset
        .transitions()
        .iter()
        .map(|t| {
            Ok(Transition {
                state: featurize(&t.state)?,
                next_state: featurize(&t.next_state)?,
                ..t.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let feature_dim = mapped[0].state.len();
    let meta = DatasetMeta {
        state_dim: feature_dim,
        policy: format!("{} (probe features)", dataset.meta().policy),
        ..dataset.meta().clone()
    };
    let features = OfflineDataset::new(mapped, meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = Network::new(feature_dim, &[], backbone.num_actions(), cfg.head(), &mut rng)?;
    let mut run = agent::train_offline(&features, head, env_cfg, cfg, mode, &featurize, rng)?;
    run.log.run_id = format!("probe_{}", run.log.run_id);
    let after = backbone.param_hash();
    if before != after {
        return Err(Error::InvalidParameter {
            name: "backbone",
            reason: "parameters changed during probing".into(),
        });
    }
    Ok(ProbeResult {
        run,
        backbone_hash_before: before,
        backbone_hash_after: after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonstationarityConfig {
    pub task: SyntheticConfig,
    pub biases: Vec<f64>,
    pub steps_per_phase: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub bins: usize,
    pub smoothing_ratio: f64,
    /// Steps between full-dataset MSE evaluations; 0 records only the end
    /// of each phase.
    pub eval_period: u64,
}

impl Default for NonstationarityConfig {
    fn default() -> Self {
        Self {
            task: SyntheticConfig::default(),
            biases: vec![0.0, 8.0, 16.0, 24.0, 32.0],
            steps_per_phase: 5000,
            batch_size: 512,
            learning_rate: 1e-3,
            adam_epsilon: 1e-8,
            v_min: -40.0,
            v_max: 40.0,
            bins: 101,
            smoothing_ratio: crate::projection::DEFAULT_SMOOTHING_RATIO,
            eval_period: 0,
        }
    }
}

/// Final full-dataset MSE of each phase for one loss kind and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    pub loss_kind: LossKind,
    pub seed: u64,
    pub biases: Vec<f64>,
    pub final_mse: Vec<f64>,
    pub log: RunLog,
}

/// Fit one network through the bias phases in order. Each phase draws a
/// new frozen target network over the same inputs; the learner and its
/// optimizer state carry over between phases.
pub fn nonstationarity_run(cfg: &NonstationarityConfig, kind: LossKind, seed: u64) -> Result<PhaseResult> {
    if cfg.biases.is_empty() {
        return Err(Error::Empty("bias sequence"));
    }
    let head = match kind {
        LossKind::Mse => Head::Scalar,
        LossKind::MseSoftmax | LossKind::TwoHot | LossKind::HlGauss => Head::Categorical { atoms: cfg.bins },
        LossKind::C51 => {
            return Err(Error::InvalidParameter {
                name: "loss_kind",
                reason: "c51 has no regression form".into(),
            })
        }
    };
    let support = match head {
        Head::Categorical { .. } => {
            let s = Support::new(cfg.v_min, cfg.v_max, cfg.bins)?;
            let lo = cfg.biases.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
            let hi = cfg.biases.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            if lo < s.centers()[0] || hi > s.centers()[s.len() - 1] {
                return Err(Error::TargetOutOfRange {
                    target: if lo < s.centers()[0] { lo } else { hi },
                    v_min: s.v_min(),
                    v_max: s.v_max(),
                    sigma: 0.0,
                });
            }
            Some(s)
        }
        Head::Scalar => None,
    };
    let hl = match (&support, kind) {
        (Some(s), LossKind::HlGauss) => Some(HlGaussParams::from_ratio(cfg.smoothing_ratio, s)?),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(cfg.task.input_dim, &cfg.task.hidden, 1, head, &mut rng)?;
    let mut opt = AdamState::new(&net, cfg.learning_rate, cfg.adam_epsilon);
    let mut log = RunLog::new(format!("{kind}_seed{seed}"), kind, seed, "synthetic".into());
    let mut final_mse = Vec::with_capacity(cfg.biases.len());
    let mut step = 0u64;
    for (phase, &bias) in cfg.biases.iter().enumerate() {
        let target_seed = seed.wrapping_mul(1_000_003).wrapping_add(phase as u64 + 1);
        let task = SyntheticTask::new(&cfg.task, seed, target_seed, bias)?;
        let targets = task.targets();
        // Target distributions are fixed within a phase.
        let dists: Option<Vec<Vec<f64>>> = match (&support, kind) {
            (Some(s), LossKind::HlGauss) => Some(
                targets
                    .iter()
                    .map(|&y| projection::hl_gauss(y, hl.as_ref().unwrap(), s).map(|p| p.into_probs()))
                    .collect::<Result<_>>()?,
            ),
            (Some(s), LossKind::TwoHot) => Some(
                targets
                    .iter()
                    .map(|&y| projection::two_hot(y, s).map(|p| p.into_probs()))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mut batch_rng = ChaCha8Rng::seed_from_u64(target_seed ^ 0xa5a5_a5a5);
        for _ in 0..cfg.steps_per_phase {
            step += 1;
            let idx = rand::seq::index::sample(&mut batch_rng, task.len(), cfg.batch_size.min(task.len())).into_vec();
            let x = task.inputs().select(Axis(0), &idx);
            let trace = net.trace_unchecked(x.view());
            let out = trace.output();
            let n = idx.len() as f64;
            let mut up = Array2::<f64>::zeros(out.raw_dim());
            for (r, &i) in idx.iter().enumerate() {
                let row = out.row(r);
                let row = row.as_slice().unwrap();
                let mut g = up.row_mut(r);
                let g = g.as_slice_mut().unwrap();
                match (&dists, &support) {
                    (Some(d), _) => {
                        ce_grad_into(row, &d[i], 1.0 / n, g);
                    }
                    (None, Some(s)) => {
                        let p = softmax(row);
                        let q: f64 = p.iter().zip(s.centers()).map(|(p, z)| p * z).sum();
                        let diff = q - targets[i];
                        for (k, (pk, zk)) in p.iter().zip(s.centers()).enumerate() {
                            g[k] = 2.0 * diff * pk * (zk - q) / n;
                        }
                    }
                    (None, None) => g[0] = 2.0 * (row[0] - targets[i]) / n,
                }
            }
            let grads = net.backward(&trace, up.view())?;
            opt.step(&mut net, &grads).map_err(|e| Error::Diverged {
                step,
                detail: format!("{kind} at bias {bias}: {e}"),
            })?;
            if cfg.eval_period > 0 && step.is_multiple_of(cfg.eval_period) {
                log.push("mse", step, dataset_mse(&net, &task, support.as_ref())?)?;
            }
        }
        let mse = dataset_mse(&net, &task, support.as_ref())?;
        final_mse.push(mse);
        log.set_final(&format!("final_mse_b{bias}"), step, mse);
    }
    Ok(PhaseResult {
        loss_kind: kind,
        seed,
        biases: cfg.biases.clone(),
        final_mse,
        log,
    })
}

/// Mean squared error of the scalar prediction over the whole dataset.
pub fn dataset_mse(net: &Network, task: &SyntheticTask, support: Option<&Support>) -> Result<f64> {
    let out = net.forward_batch(task.inputs().view())?;
    let targets = task.targets();
    let mut total = 0.0;
    for (row, y) in out.outer_iter().zip(&targets) {
        let pred = agent::q_from_row(row.as_slice().unwrap(), net.head(), support)[0];
        total += (pred - y).powi(2);
    }
    let mse = total / targets.len() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("synthetic MSE"));
    }
    Ok(mse)
}

/// Per-loss, per-seed phase results.
pub fn nonstationarity_benchmark(
    cfg: &NonstationarityConfig,
    kinds: &[LossKind],
    seeds: &[u64],
) -> Result<Vec<PhaseResult>> {
    let mut out = Vec::new();
    for &kind in kinds {
        for &seed in seeds {
            out.push(nonstationarity_run(cfg, kind, seed)?);
        }
    }
    Ok(out)
}

/// Seed-mean final MSE per bias for one loss kind.
pub fn mean_final_mse(results: &[PhaseResult], kind: LossKind) -> Vec<f64> {
    let rows: Vec<&PhaseResult> = results.iter().filter(|r| r.loss_kind == kind).collect();
    if rows.is_empty() {
        return Vec::new();
    }
    let phases = rows[0].final_mse.len();
    (0..phases)
        .map(|p| rows.iter().map(|r| r.final_mse[p]).sum::<f64>() / rows.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::random_policy_return;
    use crate::oracle::{bootstrap_ci_brute, iqm_brute};
    use crate::replay::{collect_offline, CollectionPolicy};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[7.0; 9]).unwrap(), 7.0);
        assert_eq!(iqm(&[3.0]).unwrap(), 3.0);
        assert!(matches!(iqm(&[]), Err(Error::Empty(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..60 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(iqm(&v).unwrap(), iqm_brute(&v));
        }
    }

    proptest! {
        #[test]
        fn iqm_permutation_and_shift(mut v in prop::collection::vec(-100.0f64..100.0, 1..40), c in -50.0f64..50.0, seed in any::<u64>()) {
            let base = iqm(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((iqm(&shifted).unwrap() - (base + c)).abs() < 1e-9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            prop_assert!((iqm(&v).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_basic_properties() {
        let same = vec![vec![2.0; 5], vec![2.0; 3]];
        assert_eq!(stratified_bootstrap_ci(&same, 200, 0.95, 0).unwrap(), (2.0, 2.0));
        assert!(matches!(
            stratified_bootstrap_ci(&[vec![1.0]], 10, 0.95, 0),
            Err(Error::DegenerateStrata(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let a = stratified_bootstrap_ci(&scores, 2000, 0.95, 9).unwrap();
        assert_eq!(a, stratified_bootstrap_ci(&scores, 2000, 0.95, 9).unwrap());
        let pooled: Vec<f64> = scores.concat();
        let point = iqm(&pooled).unwrap();
        assert!(a.0 <= point && point <= a.1);
    }

    #[test]
    fn bootstrap_matches_independent_resampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<Vec<f64>> = (0..2).map(|t| (0..6).map(|_| t as f64 + rng.random_range(0.0..1.0)).collect()).collect();
        let (lo, hi) = stratified_bootstrap_ci(&scores, 10_000, 0.95, 1).unwrap();
        let (blo, bhi) = bootstrap_ci_brute(&scores, 10_000, 0.95, 2);
        assert!((lo - blo).abs() < 0.01 && (hi - bhi).abs() < 0.01, "{lo} {hi} vs {blo} {bhi}");
    }

    #[test]
    fn bootstrap_width_shrinks_with_more_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = |rng: &mut ChaCha8Rng| {
            // Box-Muller
            let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        };
        let width = |n: usize, rng: &mut ChaCha8Rng| {
            let scores: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| normal(rng)).collect()).collect();
            let (lo, hi) = stratified_bootstrap_ci(&scores, 1000, 0.95, 0).unwrap();
            hi - lo
        };
        let small: f64 = (0..20).map(|_| width(5, &mut rng)).sum();
        let large: f64 = (0..20).map(|_| width(80, &mut rng)).sum();
        assert!(large < small / 2.0);
    }

    #[test]
    fn run_log_round_trips_through_csv() {
        let mut log = RunLog::new("r".into(), LossKind::TwoHot, 4, "grid".into());
        log.push("loss", 1, 0.5).unwrap();
        log.push("loss", 3, 0.25).unwrap();
        log.push("episode_return", 2, -7.0).unwrap();
        assert!(log.push("loss", 3, 0.1).is_err());
        log.set_final("final_return", 3, -6.0);
        let mut buf = Vec::new();
        log.write_csv(&mut buf, &[("config_hash", "abc".into())]).unwrap();
        let (back, meta) = RunLog::read_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, log);
        assert_eq!(meta["config_hash"], "abc");
    }

    #[test]
    fn report_rows_bracket_iqm() {
        let mut groups = BTreeMap::new();
        groups.insert((LossKind::Mse, String::new()), vec![-20.0, -10.0, -8.0, -6.0]);
        groups.insert((LossKind::HlGauss, String::new()), vec![-6.0]);
        let rep = AggregateReport::build("final_return", &groups, Some((-50.0, -6.0)), 500, 0.95, 0).unwrap();
        for r in &rep.rows {
            assert!(r.lower <= r.iqm && r.iqm <= r.upper);
        }
        assert_eq!(rep.row(LossKind::HlGauss, "").unwrap().iqm, 1.0);
        assert!(rep.to_csv().lines().count() == 6);
        assert!(rep.to_table().contains("hl_gauss"));
    }

    fn probe_cfg() -> TrainConfig {
        TrainConfig {
            loss_kind: LossKind::HlGauss,
            hidden: vec![32],
            total_steps: 1500,
            target_sync_period: 200,
            learning_rate: Some(1e-3),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn probe_leaves_backbone_untouched_and_beats_random() {
        let g = GridConfig {
            random_start: true,
            ..GridConfig::default()
        };
        let d = collect_offline(&g, &CollectionPolicy::Uniform, 100, 0).unwrap();
        let c = probe_cfg();
        let backbone = agent::run_offline(&d, &g, &c, TdMode::QLearning).unwrap().network;
        let hash = backbone.param_hash();
        let p = linear_probe(&backbone, &d, &g, &c, TdMode::QLearning).unwrap();
        assert_eq!(p.backbone_hash_before, hash);
        assert_eq!(p.backbone_hash_after, hash);
        assert_eq!(backbone.param_hash(), hash);
        let random = random_policy_return(&g, 200, 0).unwrap();
        assert!(p.run.log.final_value("final_return").unwrap() >= random);
    }

    #[test]
    fn probe_on_zero_features_has_no_signal() {
        let g = GridConfig {
            random_start: true,
            ..GridConfig::default()
        };
        let d = collect_offline(&g, &CollectionPolicy::Uniform, 50, 0).unwrap();
        let c = probe_cfg();
        let zero = Network::zeros(g.state_dim(), &[16], 4, c.head()).unwrap();
        let p = linear_probe(&zero, &d, &g, &c, TdMode::QLearning).unwrap();
        // Every state maps to the same features, so the greedy action is
        // constant and never better than acting at random.
        let random = random_policy_return(&g, 500, 1).unwrap();
        assert!(p.run.log.final_value("final_return").unwrap() <= random);
    }

    fn tiny_ns() -> NonstationarityConfig {
        NonstationarityConfig {
            task: SyntheticConfig {
                input_dim: 8,
                dataset_size: 128,
                hidden: vec![16],
                ..SyntheticConfig::default()
            },
            biases: vec![0.0, 8.0],
            steps_per_phase: 50,
            batch_size: 32,
            eval_period: 25,
            ..NonstationarityConfig::default()
        }
    }

    #[test]
    fn nonstationarity_is_reproducible() {
        let c = tiny_ns();
        for kind in [LossKind::Mse, LossKind::HlGauss, LossKind::TwoHot, LossKind::MseSoftmax] {
            let a = nonstationarity_run(&c, kind, 3).unwrap();
            let b = nonstationarity_run(&c, kind, 3).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.final_mse.len(), 2);
            assert_eq!(a.log.series("mse").len(), 4);
        }
    }

    #[test]
    fn nonstationarity_rejects_narrow_support_and_c51() {
        let c = NonstationarityConfig {
            v_min: -5.0,
            v_max: 5.0,
            ..tiny_ns()
        };
        assert!(nonstationarity_run(&c, LossKind::HlGauss, 0).is_err());
        assert!(nonstationarity_run(&tiny_ns(), LossKind::C51, 0).is_err());
    }
}
