//! Online Q-learning and offline Q-learning/SARSA with a CQL penalty, for
//! scalar and categorical value heads.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{argmax, rollout, tabular_value_iteration, Cell, GridConfig, GridWorld, Transition, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::eval::RunLog;
use crate::net::{ce_raw, log_sum_exp, softmax, AdamState, Gradients, Head, Network};
use crate::projection::{self, HlGaussParams, DEFAULT_SMOOTHING_RATIO};
use crate::replay::{OfflineDataset, ReplayBuffer, TransitionSource};
use crate::support::{ProbVector, Support};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    /// Q read as the mean of a softmax over the support, trained with
    /// squared error.
    MseSoftmax,
    TwoHot,
    HlGauss,
    C51,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Mse,
        LossKind::MseSoftmax,
        LossKind::TwoHot,
        LossKind::HlGauss,
        LossKind::C51,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::MseSoftmax => "mse_softmax",
            LossKind::TwoHot => "two_hot",
            LossKind::HlGauss => "hl_gauss",
            LossKind::C51 => "c51",
        }
    }

    /// Network head is categorical.
    pub fn has_categorical_head(self) -> bool {
        !matches!(self, LossKind::Mse)
    }

    /// Trained with cross-entropy against a distribution.
    pub fn uses_cross_entropy(self) -> bool {
        matches!(self, LossKind::TwoHot | LossKind::HlGauss | LossKind::C51)
    }

    /// Default `(learning rate, Adam epsilon)`.
    pub fn default_optimizer(self) -> (f64, f64) {
        if self.uses_cross_entropy() {
            (2.5e-4, 3.125e-4)
        } else {
            (6.25e-5, 1.5e-4)
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter {
                name: "loss_kind",
                reason: format!("unknown loss kind {s:?}"),
            })
    }
}

/// How the bootstrap action at the next state is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdMode {
    /// Greedy action under the target network.
    QLearning,
    /// Action logged in the transition.
    Sarsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub gamma: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub bins: usize,
    /// `sigma / bin width` for HL-Gauss.
    pub smoothing_ratio: f64,
    /// Falls back to the loss kind's default when unset.
    pub learning_rate: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub target_sync_period: u64,
    pub min_history: u64,
    pub update_period: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub cql_alpha: f64,
    /// Environment steps (online) or gradient steps (offline).
    pub total_steps: u64,
    /// Steps between greedy evaluation rollouts; 0 disables them.
    pub eval_period: u64,
    pub eval_episodes: usize,
    /// Updates averaged into each logged loss value.
    pub loss_log_period: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::HlGauss,
            gamma: 0.99,
            v_min: -10.0,
            v_max: 10.0,
            bins: 51,
            smoothing_ratio: DEFAULT_SMOOTHING_RATIO,
            learning_rate: None,
            adam_epsilon: None,
            batch_size: 32,
            hidden: vec![64, 64],
            replay_capacity: 1_000_000,
            target_sync_period: 8000,
            min_history: 20_000,
            update_period: 4,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_steps: 250_000,
            cql_alpha: 0.0,
            total_steps: 50_000,
            eval_period: 0,
            eval_episodes: 1,
            loss_log_period: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Field-named validation error on the first violated invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::ConfigValidation {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1)");
        }
        if self.loss_kind.has_categorical_head() {
            if let Err(e) = Support::new(self.v_min, self.v_max, self.bins) {
                return bad("v_min/v_max/bins", &e.to_string());
            }
        }
        if self.loss_kind == LossKind::HlGauss
            && !(self.smoothing_ratio > 0.0 && self.smoothing_ratio.is_finite())
        {
            return bad("smoothing_ratio", "must be positive");
        }
        let (lr, eps) = self.optimizer();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return bad("adam_epsilon", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity", "must be positive");
        }
        if self.target_sync_period == 0 || self.update_period == 0 {
            return bad("target_sync_period/update_period", "must be positive");
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return bad("epsilon_end", "must not exceed epsilon_start");
        }
        if !(self.cql_alpha >= 0.0 && self.cql_alpha.is_finite()) {
            return bad("cql_alpha", "must be non-negative");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be positive");
        }
        if self.loss_log_period == 0 {
            return bad("loss_log_period", "must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> (f64, f64) {
        let (lr, eps) = self.loss_kind.default_optimizer();
        (self.learning_rate.unwrap_or(lr), self.adam_epsilon.unwrap_or(eps))
    }

    pub fn head(&self) -> Head {
        if self.loss_kind.has_categorical_head() {
            Head::Categorical { atoms: self.bins }
        } else {
            Head::Scalar
        }
    }

    /// Exploration rate after `step` environment steps: held at the start
    /// value until `min_history`, then linear decay to the end value.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if step < self.min_history {
            return self.epsilon_start;
        }
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (step - self.min_history) as f64 / self.epsilon_decay_steps as f64;
        if frac >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// The loss and target construction derived from a [`TrainConfig`].
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: LossKind,
    pub gamma: f64,
    pub cql_alpha: f64,
    support: Option<Support>,
    hl: Option<HlGaussParams>,
}

impl Objective {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let support = if cfg.loss_kind.has_categorical_head() {
            Some(Support::new(cfg.v_min, cfg.v_max, cfg.bins)?)
        } else {
            None
        };
        let hl = match (&support, cfg.loss_kind) {
            (Some(s), LossKind::HlGauss) => Some(HlGaussParams::from_ratio(cfg.smoothing_ratio, s)?),
            _ => None,
        };
        Ok(Self {
            kind: cfg.loss_kind,
            gamma: cfg.gamma,
            cql_alpha: cfg.cql_alpha,
            support,
            hl,
        })
    }

    pub fn support(&self) -> Option<&Support> {
        self.support.as_ref()
    }

    fn check_net(&self, net: &Network) -> Result<()> {
        let want = match &self.support {
            Some(s) => Head::Categorical { atoms: s.len() },
            None => Head::Scalar,
        };
        if net.head() != want {
            return Err(Error::Shape {
                expected: format!("{want:?} head"),
                got: format!("{:?}", net.head()),
            });
        }
        Ok(())
    }
}

/// Per-action Q-values from one row of raw network output.
pub(crate) fn q_from_row(row: &[f64], head: Head, support: Option<&Support>) -> Vec<f64> {
    match head {
        Head::Scalar => row.to_vec(),
        Head::Categorical { atoms } => {
            let centers = support.expect("categorical head needs a support").centers();
            row.chunks(atoms)
                .map(|logits| {
                    let p = softmax(logits);
                    let q: f64 = p.iter().zip(centers).map(|(p, z)| p * z).sum();
                    q.clamp(centers[0], centers[atoms - 1])
                })
                .collect()
        }
    }
}

/// Q-values of every action at `state`.
pub fn q_values(net: &Network, state: &[f64], support: Option<&Support>) -> Result<Vec<f64>> {
    let out = net.forward(state)?;
    Ok(q_from_row(&out, net.head(), support))
}

/// Scalar target from the target network's raw output at `s'`; `next_out`
/// is ignored for terminal transitions.
fn scalar_from_output(
    t: &Transition,
    next_out: &[f64],
    head: Head,
    gamma: f64,
    support: Option<&Support>,
    mode: TdMode,
) -> Result<f64> {
    if t.terminal || gamma == 0.0 {
        return Ok(t.reward);
    }
    let q = q_from_row(next_out, head, support);
    let next = match mode {
        TdMode::QLearning => q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        TdMode::Sarsa => q[next_action(t, q.len())?],
    };
    Ok(t.reward + gamma * next)
}

fn dist_from_output(
    t: &Transition,
    next_out: &[f64],
    head: Head,
    obj: &Objective,
    mode: TdMode,
) -> Result<ProbVector> {
    let support = obj.support.as_ref().ok_or_else(|| Error::InvalidParameter {
        name: "loss_kind",
        reason: format!("{} has no categorical target", obj.kind),
    })?;
    let scalar = || scalar_from_output(t, next_out, head, obj.gamma, Some(support), mode);
    match obj.kind {
        LossKind::TwoHot => projection::two_hot(scalar()?, support),
        LossKind::HlGauss => projection::hl_gauss(scalar()?, obj.hl.as_ref().unwrap(), support),
        LossKind::C51 => {
            if t.terminal {
                return projection::c51_target(t.reward, obj.gamma, &support.uniform(), support, true);
            }
            let q = q_from_row(next_out, head, Some(support));
            let a = match mode {
                TdMode::QLearning => argmax(&q),
                TdMode::Sarsa => next_action(t, q.len())?,
            };
            let m = support.len();
            let next = ProbVector::new(softmax(&next_out[a * m..(a + 1) * m]), support)?;
            projection::c51_target(t.reward, obj.gamma, &next, support, false)
        }
        LossKind::Mse | LossKind::MseSoftmax => Err(Error::InvalidParameter {
            name: "loss_kind",
            reason: format!("{} is trained on scalar targets", obj.kind),
        }),
    }
}

fn next_output(t: &Transition, target_net: &Network) -> Result<Vec<f64>> {
    if t.terminal {
        return Ok(Vec::new());
    }
    target_net.forward(&t.next_state)
}

fn next_action(t: &Transition, num_actions: usize) -> Result<usize> {
    let a = t.next_action.ok_or(Error::MissingNextAction)?;
    if a >= num_actions {
        return Err(Error::ActionOutOfRange { action: a, num_actions });
    }
    Ok(a)
}

/// `r + gamma * max_a' Q(s', a')` under the target network, or `r` at a
/// terminal transition.
pub fn scalar_td_target(
    t: &Transition,
    target_net: &Network,
    gamma: f64,
    support: Option<&Support>,
) -> Result<f64> {
    let out = next_output(t, target_net)?;
    scalar_from_output(t, &out, target_net.head(), gamma, support, TdMode::QLearning)
}

/// `r + gamma * Q(s', a'_logged)` under the target network.
pub fn sarsa_td_target(
    t: &Transition,
    target_net: &Network,
    gamma: f64,
    support: Option<&Support>,
) -> Result<f64> {
    if !t.terminal {
        next_action(t, target_net.num_actions())?;
    }
    let out = next_output(t, target_net)?;
    scalar_from_output(t, &out, target_net.head(), gamma, support, TdMode::Sarsa)
}

/// Target distribution for the cross-entropy losses.
pub fn categorical_td_target(
    t: &Transition,
    target_net: &Network,
    obj: &Objective,
    mode: TdMode,
) -> Result<ProbVector> {
    obj.check_net(target_net)?;
    let out = next_output(t, target_net)?;
    dist_from_output(t, &out, target_net.head(), obj, mode)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Batch-mean TD loss.
    pub td_loss: f64,
    /// CQL term, already scaled by alpha.
    pub penalty: f64,
}

impl UpdateStats {
    pub fn total(&self) -> f64 {
        self.td_loss + self.penalty
    }
}

fn stack(rows: impl ExactSizeIterator<Item = impl AsRef<[f64]>>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * dim);
    for r in rows {
        flat.extend_from_slice(r.as_ref());
    }
    Array2::from_shape_vec((n, dim), flat).expect("uniform state width")
}

fn check_batch(batch: &[Transition], net: &Network) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for t in batch {
        if t.action >= net.num_actions() {
            return Err(Error::ActionOutOfRange {
                action: t.action,
                num_actions: net.num_actions(),
            });
        }
        for s in [&t.state, &t.next_state] {
            if s.len() != net.input_dim() {
                return Err(Error::Shape {
                    expected: format!("{} state features", net.input_dim()),
                    got: s.len().to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Per-example targets: scalars for the regression losses, distributions
/// for the cross-entropy losses. Computed from the frozen target network.
enum Targets {
    Scalar(Vec<f64>),
    Dist(Vec<Vec<f64>>),
}

fn batch_targets(batch: &[Transition], target_net: &Network, obj: &Objective, mode: TdMode) -> Result<Targets> {
    let x = stack(batch.iter().map(|t| &t.next_state), target_net.input_dim());
    let out = target_net.forward_batch(x.view())?;
    let head = target_net.head();
    let rows = batch.iter().zip(out.outer_iter());
    if obj.kind.uses_cross_entropy() {
        rows.map(|(t, row)| {
            dist_from_output(t, row.as_slice().unwrap(), head, obj, mode).map(ProbVector::into_probs)
        })
        .collect::<Result<Vec<_>>>()
        .map(Targets::Dist)
    } else {
        rows.map(|(t, row)| {
            let y = scalar_from_output(t, row.as_slice().unwrap(), head, obj.gamma, obj.support.as_ref(), mode)?;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::NonFinite("TD target"))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Targets::Scalar)
    }
}

/// Loss and parameter gradient of one batch, without touching either
/// network. The CQL term is included when `with_penalty` is set and
/// alpha is positive.
pub fn loss_and_gradients(
    batch: &[Transition],
    online: &Network,
    target_net: &Network,
    obj: &Objective,
    mode: TdMode,
    with_penalty: bool,
) -> Result<(UpdateStats, Gradients)> {
    check_batch(batch, online)?;
    obj.check_net(online)?;
    obj.check_net(target_net)?;
    let targets = batch_targets(batch, target_net, obj, mode)?;

    let x = stack(batch.iter().map(|t| &t.state), online.input_dim());
    let trace = online.trace(x.view())?;
    let out = trace.output();
    let width = online.head().width();
    let n = batch.len() as f64;
    let mut upstream = Array2::<f64>::zeros(out.raw_dim());
    let mut td_loss = 0.0;
    let centers = obj.support.as_ref().map(|s| s.centers());

    for (i, t) in batch.iter().enumerate() {
        let row = out.row(i);
        let row = row.as_slice().expect("contiguous output");
        let block = t.action * width..(t.action + 1) * width;
        let logits = &row[block.clone()];
        let mut up = upstream.row_mut(i);
        let up = up.as_slice_mut().expect("contiguous upstream");
        match (&targets, obj.kind) {
            (Targets::Scalar(y), LossKind::Mse) => {
                let diff = logits[0] - y[i];
                td_loss += diff * diff;
                up[block.start] = 2.0 * diff / n;
            }
            (Targets::Scalar(y), LossKind::MseSoftmax) => {
                let z = centers.unwrap();
                let p = softmax(logits);
                let q: f64 = p.iter().zip(z).map(|(p, z)| p * z).sum();
                let diff = q - y[i];
                td_loss += diff * diff;
                for (k, (pk, zk)) in p.iter().zip(z).enumerate() {
                    up[block.start + k] = 2.0 * diff * pk * (zk - q) / n;
                }
            }
            (Targets::Dist(d), _) => {
                let (l, g) = ce_raw(logits, &d[i]);
                td_loss += l;
                for (k, gk) in g.into_iter().enumerate() {
                    up[block.start + k] = gk / n;
                }
            }
            _ => unreachable!("targets follow the loss kind"),
        }
    }
    td_loss /= n;

    let mut penalty = 0.0;
    if with_penalty && obj.cql_alpha > 0.0 {
        penalty = add_cql(batch, out.view(), online.head(), obj, &mut upstream);
    }

    if !(td_loss.is_finite() && penalty.is_finite()) {
        return Err(Error::NonFinite("loss"));
    }
    let grads = online.backward(&trace, upstream.view())?;
    Ok((UpdateStats { td_loss, penalty }, grads))
}

/// Adds `alpha / B * d/d(out) sum_b [lse_a Q(s_b, a) - Q(s_b, a_b)]` into
/// `upstream` and returns the penalty value.
fn add_cql(batch: &[Transition], out: ArrayView2<f64>, head: Head, obj: &Objective, upstream: &mut Array2<f64>) -> f64 {
    let n = batch.len() as f64;
    let alpha = obj.cql_alpha;
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let row = out.row(i);
        let row = row.as_slice().unwrap();
        let q = q_from_row(row, head, obj.support.as_ref());
        total += log_sum_exp(&q) - q[t.action];
        // dpenalty/dQ_a
        let mut dq = softmax(&q);
        dq[t.action] -= 1.0;
        let mut up = upstream.row_mut(i);
        let up = up.as_slice_mut().unwrap();
        match head {
            Head::Scalar => {
                for (a, d) in dq.iter().enumerate() {
                    up[a] += alpha * d / n;
                }
            }
            Head::Categorical { atoms } => {
                let z = obj.support.as_ref().unwrap().centers();
                for (a, d) in dq.iter().enumerate() {
                    let block = a * atoms..(a + 1) * atoms;
                    let p = softmax(&row[block.clone()]);
                    let qa: f64 = p.iter().zip(z).map(|(p, z)| p * z).sum();
                    for k in 0..atoms {
                        up[block.start + k] += alpha * d / n * p[k] * (z[k] - qa);
                    }
                }
            }
        }
    }
    alpha * total / n
}

/// CQL penalty at the logged states and its parameter gradient.
pub fn cql_penalty(batch: &[Transition], online: &Network, obj: &Objective) -> Result<(f64, Gradients)> {
    check_batch(batch, online)?;
    obj.check_net(online)?;
    if obj.cql_alpha == 0.0 {
        return Ok((0.0, Gradients::zeros_like(online)));
    }
    let x = stack(batch.iter().map(|t| &t.state), online.input_dim());
    let trace = online.trace(x.view())?;
    let mut upstream = Array2::zeros(trace.output().raw_dim());
    let p = add_cql(batch, trace.output().view(), online.head(), obj, &mut upstream);
    Ok((p, online.backward(&trace, upstream.view())?))
}

fn diverged(step: u64, e: Error, batch: &[Transition]) -> Error {
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    Error::Diverged {
        step,
        detail: format!("{e}; batch rewards {rewards:?}"),
    }
}

/// One Adam step on the TD loss of `batch`. Only the logged action's
/// output block receives gradient; `target_net` is read only.
pub fn td_update(
    batch: &[Transition],
    online: &mut Network,
    target_net: &Network,
    opt: &mut AdamState,
    obj: &Objective,
    mode: TdMode,
) -> Result<UpdateStats> {
    apply(batch, online, target_net, opt, obj, mode, false)
}

fn apply(
    batch: &[Transition],
    online: &mut Network,
    target_net: &Network,
    opt: &mut AdamState,
    obj: &Objective,
    mode: TdMode,
    with_penalty: bool,
) -> Result<UpdateStats> {
    let step = opt.step_count();
    let (stats, grads) =
        loss_and_gradients(batch, online, target_net, obj, mode, with_penalty).map_err(|e| match e {
            Error::NonFinite(_) => diverged(step, e, batch),
            other => other,
        })?;
    opt.step(online, &grads).map_err(|e| diverged(step, e, batch))?;
    Ok(stats)
}

/// TD step plus the CQL penalty. With alpha = 0 this is exactly
/// [`td_update`].
pub fn offline_update(
    batch: &[Transition],
    online: &mut Network,
    target_net: &Network,
    opt: &mut AdamState,
    obj: &Objective,
    mode: TdMode,
) -> Result<UpdateStats> {
    apply(batch, online, target_net, opt, obj, mode, true)
}

/// Whether the support contains every optimal state value of the
/// noise-free, non-sticky version of the grid.
pub fn support_covers_optimum(env: &GridConfig, gamma: f64, support: &Support) -> Result<bool> {
    let det = GridConfig {
        sticky_prob: 0.0,
        reward_noise: 0.0,
        ..env.clone()
    };
    let q = tabular_value_iteration(&det, gamma)?;
    Ok((0..det.num_cells()).all(|i| {
        let v = q.value(det.cell_at(i));
        v >= support.v_min() && v <= support.v_max()
    }))
}

fn warn_on_range(env: &GridConfig, obj: &Objective) -> Result<()> {
    if let Some(s) = obj.support() {
        if !support_covers_optimum(env, obj.gamma, s)? {
            log::warn!(
                "optimal values of {} leave the support [{}, {}]",
                env.tag(),
                s.v_min(),
                s.v_max()
            );
        }
    }
    Ok(())
}

/// A trained network together with its log.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: RunLog,
    pub network: Network,
}

/// Greedy action of `net` at `state`, lowest index on ties.
pub fn greedy_action(net: &Network, state: &[f64], support: Option<&Support>) -> Result<usize> {
    let q = q_values(net, state, support)?;
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Q-values"));
    }
    Ok(argmax(&q))
}

/// Mean undiscounted return of the greedy policy in a noise-free copy of
/// the grid, over `episodes` episodes from each start cell. `features` maps
/// a raw state to the network input.
pub fn evaluate_greedy(
    net: &Network,
    support: Option<&Support>,
    env: &GridConfig,
    episodes: usize,
    seed: u64,
    features: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let cfg = env.noise_free();
    let mut world = GridWorld::new(cfg.clone(), seed)?;
    let starts = cfg.start_cells();
    // Greedy actions per cell are fixed during an evaluation.
    let mut actions = Vec::with_capacity(cfg.num_cells());
    for i in 0..cfg.num_cells() {
        let s = features(&cfg.encode(cfg.cell_at(i)))?;
        actions.push(greedy_action(net, &s, support)?);
    }
    let mut total = 0.0;
    for &start in &starts {
        for _ in 0..episodes {
            total += rollout(&mut world, start, |c| actions[cfg.cell_index(c)])?;
        }
    }
    Ok(total / (episodes * starts.len()) as f64)
}

fn identity(s: &[f64]) -> Result<Vec<f64>> {
    Ok(s.to_vec())
}

pub fn run_tag(kind: LossKind, seed: u64) -> String {
    format!("{kind}_seed{seed}")
}

/// Online DQN-style training in the grid.
pub fn run_online(env_cfg: &GridConfig, cfg: &TrainConfig) -> Result<RunResult> {
    let obj = Objective::new(cfg)?;
    warn_on_range(env_cfg, &obj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = GridWorld::new(env_cfg.clone(), cfg.seed.wrapping_add(1))?;
    let mut online = Network::new(env_cfg.state_dim(), &cfg.hidden, NUM_ACTIONS, cfg.head(), &mut rng)?;
    let mut target = online.clone();
    let (lr, eps) = cfg.optimizer();
    let mut opt = AdamState::new(&online, lr, eps);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity, cfg.seed.wrapping_add(2))?;
    let mut log = RunLog::new(run_tag(cfg.loss_kind, cfg.seed), cfg.loss_kind, cfg.seed, env_cfg.tag());

    let mut losses = LossWindow::new(cfg.loss_log_period);
    let mut state = env.reset();
    let mut episode_return = 0.0;
    for step in 1..=cfg.total_steps {
        let explore = rng.random::<f64>() < cfg.epsilon_at(step - 1);
        let action = if explore {
            rng.random_range(0..NUM_ACTIONS)
        } else {
            greedy_action(&online, &state, obj.support()).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?
        };
        let out = env.step(action)?;
        episode_return += out.true_reward;
        state = out.transition.next_state.clone();
        buffer.push(out.transition);
        if out.done {
            log.push("episode_return", step, episode_return)?;
            episode_return = 0.0;
            state = env.reset();
        }
        if step >= cfg.min_history && step % cfg.update_period == 0 && buffer.len() >= cfg.batch_size {
            let batch = buffer.sample_batch(cfg.batch_size)?;
            let stats = td_update(&batch, &mut online, &target, &mut opt, &obj, TdMode::QLearning)
                .map_err(|e| relabel(e, step))?;
            losses.record(&mut log, step, stats.total())?;
        }
        if step % cfg.target_sync_period == 0 {
            target = online.clone();
        }
        if cfg.eval_period > 0 && step % cfg.eval_period == 0 {
            let r = evaluate_greedy(&online, obj.support(), env_cfg, cfg.eval_episodes, cfg.seed, &identity)?;
            log.push("eval_return", step, r)?;
        }
    }
    let final_return = evaluate_greedy(&online, obj.support(), env_cfg, cfg.eval_episodes, cfg.seed, &identity)?;
    log.set_final("final_return", cfg.total_steps, final_return);
    Ok(RunResult { log, network: online })
}

// Logs the mean loss of every `period` consecutive updates.
struct LossWindow {
    period: u64,
    count: u64,
    sum: f64,
}

impl LossWindow {
    fn new(period: u64) -> Self {
        Self { period, count: 0, sum: 0.0 }
    }

    fn record(&mut self, log: &mut RunLog, step: u64, loss: f64) -> Result<()> {
        self.sum += loss;
        self.count += 1;
        if self.count == self.period {
            log.push("loss", step, self.sum / self.period as f64)?;
            self.count = 0;
            self.sum = 0.0;
        }
        Ok(())
    }
}

fn relabel(e: Error, step: u64) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    }
}

/// Offline training on a fixed dataset.
pub fn run_offline(
    dataset: &OfflineDataset,
    env_cfg: &GridConfig,
    cfg: &TrainConfig,
    mode: TdMode,
) -> Result<RunResult> {
    if dataset.meta().state_dim != env_cfg.state_dim() {
        return Err(Error::Shape {
            expected: format!("dataset state dim {}", env_cfg.state_dim()),
            got: dataset.meta().state_dim.to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let online = Network::new(env_cfg.state_dim(), &cfg.hidden, NUM_ACTIONS, cfg.head(), &mut rng)?;
    train_offline(dataset, online, env_cfg, cfg, mode, &identity, rng)
}

/// Offline loop shared with the linear probe: `online` consumes
/// `features(state)`; the dataset is already in that space.
pub(crate) fn train_offline(
    dataset: &OfflineDataset,
    mut online: Network,
    env_cfg: &GridConfig,
    cfg: &TrainConfig,
    mode: TdMode,
    features: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    mut rng: ChaCha8Rng,
) -> Result<RunResult> {
    let obj = Objective::new(cfg)?;
    let missing = dataset.missing_actions();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    if mode == TdMode::Sarsa && dataset.transitions().iter().any(|t| !t.terminal && t.next_action.is_none()) {
        return Err(Error::MissingNextAction);
    }
    warn_on_range(env_cfg, &obj)?;
    let mut target = online.clone();
    let (lr, eps) = cfg.optimizer();
    let mut opt = AdamState::new(&online, lr, eps);
    let mut log = RunLog::new(run_tag(cfg.loss_kind, cfg.seed), cfg.loss_kind, cfg.seed, env_cfg.tag());
    let mut losses = LossWindow::new(cfg.loss_log_period);
    for step in 1..=cfg.total_steps {
        let batch: Vec<Transition> = dataset
            .sample(cfg.batch_size.min(dataset.len()), &mut rng)?
            .into_iter()
            .cloned()
            .collect();
        let stats = offline_update(&batch, &mut online, &target, &mut opt, &obj, mode)
            .map_err(|e| relabel(e, step))?;
        losses.record(&mut log, step, stats.total())?;
        if step % cfg.target_sync_period == 0 {
            target = online.clone();
        }
        if cfg.eval_period > 0 && step % cfg.eval_period == 0 {
            let r = evaluate_greedy(&online, obj.support(), env_cfg, cfg.eval_episodes, cfg.seed, features)?;
            log.push("eval_return", step, r)?;
        }
    }
    let final_return = evaluate_greedy(&online, obj.support(), env_cfg, cfg.eval_episodes, cfg.seed, features)?;
    log.set_final("final_return", cfg.total_steps, final_return);
    Ok(RunResult { log, network: online })
}

/// Q-table read off a trained grid network.
pub fn network_q_table(net: &Network, support: Option<&Support>, env: &GridConfig) -> Result<Vec<(Cell, Vec<f64>)>> {
    (0..env.num_cells())
        .map(|i| {
            let c = env.cell_at(i);
            Ok((c, q_values(net, &env.encode(c), support)?))
        })
        .collect()
}
