//! Desk-scale environments: a gridworld with sticky actions and reward
//! noise, tabular ground-truth solvers for it, and the synthetic
//! non-stationary regression task.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Head, Network};

pub const NUM_ACTIONS: usize = 4;

/// Row/column offsets for up, right, down, left.
const MOVES: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub sticky_prob: f64,
    /// Scale of the additive `Uniform(0, eta)` reward noise.
    pub reward_noise: f64,
    pub max_steps: usize,
    /// Begin each episode in a uniformly drawn non-goal cell instead of
    /// `start`. Evaluation then averages over every non-goal cell.
    pub random_start: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            start: Cell::new(0, 0),
            goal: Cell::new(4, 4),
            step_reward: -1.0,
            goal_reward: 1.0,
            sticky_prob: 0.0,
            reward_noise: 0.0,
            max_steps: 100,
            random_start: false,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if self.width == 0 || self.height == 0 || self.width * self.height < 2 {
            return bad("width/height", "grid needs at least two cells");
        }
        for (name, c) in [("start", self.start), ("goal", self.goal)] {
            if c.row >= self.height || c.col >= self.width {
                return bad(name, "cell outside the grid");
            }
        }
        if self.start == self.goal {
            return bad("goal", "start and goal must differ");
        }
        if !(0.0..=1.0).contains(&self.sticky_prob) {
            return bad("sticky_prob", "must lie in [0, 1]");
        }
        if !(self.reward_noise >= 0.0 && self.reward_noise.is_finite()) {
            return bad("reward_noise", "must be non-negative");
        }
        if !self.step_reward.is_finite() || !self.goal_reward.is_finite() {
            return bad("step_reward/goal_reward", "must be finite");
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be positive");
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.sticky_prob == 0.0 && self.reward_noise == 0.0
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn state_dim(&self) -> usize {
        self.width + self.height
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c.row * self.width + c.col
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.width, index % self.width)
    }

    /// Concatenated one-hot row and one-hot column.
    pub fn encode(&self, c: Cell) -> Vec<f64> {
        let mut v = vec![0.0; self.state_dim()];
        v[c.row] = 1.0;
        v[self.height + c.col] = 1.0;
        v
    }

    pub fn decode(&self, state: &[f64]) -> Option<Cell> {
        if state.len() != self.state_dim() {
            return None;
        }
        let row = state[..self.height].iter().position(|&x| x == 1.0)?;
        let col = state[self.height..].iter().position(|&x| x == 1.0)?;
        Some(Cell::new(row, col))
    }

    /// Deterministic successor, clamped at walls.
    pub fn next_cell(&self, c: Cell, action: usize) -> Cell {
        let (dr, dc) = MOVES[action];
        let row = (c.row as isize + dr).clamp(0, self.height as isize - 1) as usize;
        let col = (c.col as isize + dc).clamp(0, self.width as isize - 1) as usize;
        Cell::new(row, col)
    }

    /// Noise-free reward for entering `next`.
    pub fn base_reward(&self, next: Cell) -> f64 {
        if next == self.goal {
            self.goal_reward
        } else {
            self.step_reward
        }
    }

    /// Same grid with reward noise switched off.
    pub fn noise_free(&self) -> Self {
        Self {
            reward_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn tag(&self) -> String {
        format!(
            "grid{}x{}_sticky{}_eta{}{}",
            self.width,
            self.height,
            self.sticky_prob,
            self.reward_noise,
            if self.random_start { "_randstart" } else { "" }
        )
    }

    /// Cells episodes may begin in.
    pub fn start_cells(&self) -> Vec<Cell> {
        if self.random_start {
            (0..self.num_cells())
                .map(|i| self.cell_at(i))
                .filter(|&c| c != self.goal)
                .collect()
        } else {
            vec![self.start]
        }
    }
}

/// One environment step `(s, a, r, s', a', terminal)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Action taken at `next_state`, when logged for SARSA.
    pub next_action: Option<usize>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub transition: Transition,
    /// Reward without the injected noise.
    pub true_reward: f64,
    pub executed_action: usize,
    /// The previous action was repeated instead of the chosen one.
    pub sticky: bool,
    /// The episode is over (goal reached or step limit hit).
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    cfg: GridConfig,
    pos: Cell,
    steps: usize,
    prev_action: Option<usize>,
    done: bool,
    rng: ChaCha8Rng,
}

impl GridWorld {
    pub fn new(cfg: GridConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            pos: cfg.start,
            cfg,
            steps: 0,
            prev_action: None,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn position(&self) -> Cell {
        self.pos
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let start = if self.cfg.random_start {
            let cells = self.cfg.start_cells();
            cells[self.rng.random_range(0..cells.len())]
        } else {
            self.cfg.start
        };
        self.reset_to(start)
    }

    /// Begin an episode in `cell`, which must not be the goal.
    pub fn reset_to(&mut self, cell: Cell) -> Vec<f64> {
        assert!(cell != self.cfg.goal, "episode cannot start at the goal");
        self.pos = cell;
        self.steps = 0;
        self.prev_action = None;
        self.done = false;
        self.cfg.encode(self.pos)
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeOver);
        }
        if action >= NUM_ACTIONS {
            return Err(Error::ActionOutOfRange {
                action,
                num_actions: NUM_ACTIONS,
            });
        }
        // Both draws happen every step so stickiness and noise streams stay
        // aligned across configurations sharing a seed.
        let u_sticky: f64 = self.rng.random();
        let u_noise: f64 = self.rng.random();
        let (executed, sticky) = match self.prev_action {
            Some(prev) if u_sticky < self.cfg.sticky_prob => (prev, true),
            _ => (action, false),
        };
        let state = self.cfg.encode(self.pos);
        let next = self.cfg.next_cell(self.pos, executed);
        let true_reward = self.cfg.base_reward(next);
        let reward = true_reward + self.cfg.reward_noise * u_noise;
        let terminal = next == self.cfg.goal;
        self.pos = next;
        self.steps += 1;
        self.prev_action = Some(executed);
        self.done = terminal || self.steps >= self.cfg.max_steps;
        Ok(Step {
            transition: Transition {
                state,
                action,
                reward,
                next_state: self.cfg.encode(next),
                next_action: None,
                terminal,
            },
            true_reward,
            executed_action: executed,
            sticky,
            done: self.done,
        })
    }
}

/// Tabular action values indexed by grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    cfg: GridConfig,
    values: Vec<[f64; NUM_ACTIONS]>,
}

impl QTable {
    pub fn q(&self, c: Cell, action: usize) -> f64 {
        self.values[self.cfg.cell_index(c)][action]
    }

    pub fn row(&self, c: Cell) -> &[f64; NUM_ACTIONS] {
        &self.values[self.cfg.cell_index(c)]
    }

    pub fn value(&self, c: Cell) -> f64 {
        self.row(c).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action with ties broken towards the lowest index.
    pub fn greedy(&self, c: Cell) -> usize {
        argmax(self.row(c))
    }

    /// Actions within `tol` of the best value.
    pub fn optimal_actions(&self, c: Cell, tol: f64) -> Vec<usize> {
        let best = self.value(c);
        (0..NUM_ACTIONS)
            .filter(|&a| self.q(c, a) >= best - tol)
            .collect()
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    /// Largest change a further Bellman optimality backup would make.
    pub fn bellman_residual(&self, gamma: f64) -> f64 {
        let next = optimality_backup(&self.cfg, &self.values, gamma);
        max_abs_diff(&next, &self.values)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max_abs_diff(a: &[[f64; NUM_ACTIONS]], b: &[[f64; NUM_ACTIONS]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn optimality_backup(
    cfg: &GridConfig,
    q: &[[f64; NUM_ACTIONS]],
    gamma: f64,
) -> Vec<[f64; NUM_ACTIONS]> {
    (0..cfg.num_cells())
        .map(|i| {
            let c = cfg.cell_at(i);
            let mut row = [0.0; NUM_ACTIONS];
            if c == cfg.goal {
                return row;
            }
            for (a, slot) in row.iter_mut().enumerate() {
                let n = cfg.next_cell(c, a);
                let boot = if n == cfg.goal {
                    0.0
                } else {
                    q[cfg.cell_index(n)]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                *slot = cfg.base_reward(n) + gamma * boot;
            }
            row
        })
        .collect()
}

/// Optimal Q-table of a deterministic grid by value iteration, iterated to
/// a sup-norm change below 1e-12. The goal is absorbing with zero value.
pub fn tabular_value_iteration(cfg: &GridConfig, gamma: f64) -> Result<QTable> {
    cfg.validate()?;
    if !cfg.is_deterministic() {
        return Err(Error::NonDeterministicEnv);
    }
    check_gamma(gamma)?;
    let mut q = vec![[0.0; NUM_ACTIONS]; cfg.num_cells()];
    for _ in 0..1_000_000 {
        let next = optimality_backup(cfg, &q, gamma);
        let delta = max_abs_diff(&next, &q);
        q = next;
        if delta < 1e-12 {
            break;
        }
    }
    Ok(QTable {
        cfg: cfg.clone(),
        values: q,
    })
}

/// Action values of a fixed stochastic policy on a grid without sticky
/// actions. Reward noise enters through its mean `eta / 2`.
pub fn tabular_policy_evaluation(
    cfg: &GridConfig,
    gamma: f64,
    policy: impl Fn(Cell) -> [f64; NUM_ACTIONS],
) -> Result<QTable> {
    cfg.validate()?;
    if cfg.sticky_prob != 0.0 {
        return Err(Error::NonDeterministicEnv);
    }
    check_gamma(gamma)?;
    let noise_mean = cfg.reward_noise / 2.0;
    let probs: Vec<[f64; NUM_ACTIONS]> = (0..cfg.num_cells()).map(|i| policy(cfg.cell_at(i))).collect();
    let mut q = vec![[0.0; NUM_ACTIONS]; cfg.num_cells()];
    for _ in 0..10_000_000 {
        let mut delta: f64 = 0.0;
        // Gauss-Seidel sweep.
        for i in 0..cfg.num_cells() {
            let c = cfg.cell_at(i);
            if c == cfg.goal {
                continue;
            }
            for a in 0..NUM_ACTIONS {
                let n = cfg.next_cell(c, a);
                let boot = if n == cfg.goal {
                    0.0
                } else {
                    let j = cfg.cell_index(n);
                    q[j].iter().zip(&probs[j]).map(|(v, p)| v * p).sum()
                };
                let new = cfg.base_reward(n) + noise_mean + gamma * boot;
                delta = delta.max((new - q[i][a]).abs());
                q[i][a] = new;
            }
        }
        if delta < 1e-13 {
            break;
        }
    }
    Ok(QTable {
        cfg: cfg.clone(),
        values: q,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidParameter {
            name: "gamma",
            reason: format!("must lie in [0, 1), got {gamma}"),
        });
    }
    Ok(())
}

/// Undiscounted return of one episode from `start` under `policy`, which
/// sees the current cell.
pub fn rollout(env: &mut GridWorld, start: Cell, mut policy: impl FnMut(Cell) -> usize) -> Result<f64> {
    env.reset_to(start);
    let mut total = 0.0;
    while !env.is_done() {
        let a = policy(env.position());
        total += env.step(a)?.true_reward;
    }
    Ok(total)
}

/// Mean return of the uniform-random policy: `episodes` episodes from each
/// start cell, averaged.
pub fn random_policy_return(cfg: &GridConfig, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = GridWorld::new(cfg.noise_free(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let starts = cfg.start_cells();
    let mut total = 0.0;
    for &start in &starts {
        for _ in 0..episodes {
            total += rollout(&mut env, start, |_| rng.random_range(0..NUM_ACTIONS))?;
        }
    }
    Ok(total / (episodes * starts.len()) as f64)
}

/// Return of the value-iteration greedy policy in the deterministic grid,
/// averaged over start cells.
pub fn optimal_return(cfg: &GridConfig, gamma: f64) -> Result<f64> {
    let det = GridConfig {
        sticky_prob: 0.0,
        reward_noise: 0.0,
        ..cfg.clone()
    };
    let q = tabular_value_iteration(&det, gamma)?;
    let mut env = GridWorld::new(det.clone(), 0)?;
    let starts = det.start_cells();
    let mut total = 0.0;
    for &start in &starts {
        total += rollout(&mut env, start, |c| q.greedy(c))?;
    }
    Ok(total / starts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub dataset_size: usize,
    /// Hidden widths shared by the frozen target network and the learner.
    pub hidden: Vec<usize>,
    /// Multiplier inside the sine.
    pub frequency: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            dataset_size: 4096,
            hidden: vec![16, 16],
            frequency: 1e5,
        }
    }
}

/// Fixed random inputs with targets `sin(frequency * f(x)) + bias`, where
/// `f` is a frozen randomly initialised network.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    inputs: Array2<f64>,
    base: Vec<f64>,
    bias: f64,
    target_net: Network,
}

impl SyntheticTask {
    /// Inputs are drawn from `input_seed`; the target network from
    /// `target_seed`.
    pub fn new(cfg: &SyntheticConfig, input_seed: u64, target_seed: u64, bias: f64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.dataset_size == 0 {
            return Err(Error::InvalidParameter {
                name: "synthetic",
                reason: "input_dim and dataset_size must be positive".into(),
            });
        }
        if !bias.is_finite() {
            return Err(Error::NonFinite("synthetic bias"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
        let inputs = Array2::from_shape_fn((cfg.dataset_size, cfg.input_dim), |_| {
            rng.random_range(-1.0..1.0)
        });
        let mut trng = ChaCha8Rng::seed_from_u64(target_seed);
        let target_net = Network::new(cfg.input_dim, &cfg.hidden, 1, Head::Scalar, &mut trng)?;
        let out = target_net.forward_batch(inputs.view())?;
        let base: Vec<f64> = out.iter().map(|f| (cfg.frequency * f).sin()).collect();
        if base.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("synthetic targets"));
        }
        Ok(Self {
            inputs,
            base,
            bias,
            target_net,
        })
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn target_net(&self) -> &Network {
        &self.target_net
    }

    pub fn targets(&self) -> Vec<f64> {
        self.base.iter().map(|s| s + self.bias).collect()
    }

    /// Uniform sample without replacement.
    pub fn synthetic_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        if batch_size > self.len() {
            return Err(Error::Underfilled {
                requested: batch_size,
                available: self.len(),
            });
        }
        let idx = rand::seq::index::sample(rng, self.len(), batch_size).into_vec();
        let x = self.inputs.select(ndarray::Axis(0), &idx);
        let y = idx.iter().map(|&i| self.base[i] + self.bias).collect();
        Ok((x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> GridConfig {
        GridConfig::default()
    }

    #[test]
    fn reset_encodes_start() {
        let mut env = GridWorld::new(det(), 0).unwrap();
        let s = env.reset();
        let mut want = vec![0.0; 10];
        want[0] = 1.0;
        want[5] = 1.0;
        assert_eq!(s, want);
        assert_eq!(env.reset(), s);
        env.step(1).unwrap();
        env.step(2).unwrap();
        assert_eq!(env.reset(), s);
        assert_eq!(det().decode(&s), Some(Cell::new(0, 0)));
    }

    #[test]
    fn wall_clamps() {
        let mut env = GridWorld::new(det(), 0).unwrap();
        env.reset();
        let step = env.step(0).unwrap();
        assert_eq!(env.position(), Cell::new(0, 0));
        assert_eq!(step.transition.reward, -1.0);
        assert!(!step.transition.terminal);
    }

    #[test]
    fn goal_is_terminal() {
        let cfg = GridConfig {
            start: Cell::new(4, 3),
            ..det()
        };
        let mut env = GridWorld::new(cfg, 0).unwrap();
        env.reset();
        let step = env.step(1).unwrap();
        assert!(step.transition.terminal && step.done);
        assert_eq!(step.transition.reward, 1.0);
        assert!(matches!(env.step(1), Err(Error::EpisodeOver)));
    }

    #[test]
    fn step_limit_ends_episode_without_terminal_flag() {
        let cfg = GridConfig { max_steps: 3, ..det() };
        let mut env = GridWorld::new(cfg, 0).unwrap();
        env.reset();
        env.step(0).unwrap();
        env.step(0).unwrap();
        let last = env.step(0).unwrap();
        assert!(last.done && !last.transition.terminal);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(GridWorld::new(GridConfig { goal: Cell::new(0, 0), ..det() }, 0).is_err());
        assert!(GridWorld::new(GridConfig { sticky_prob: 1.5, ..det() }, 0).is_err());
        assert!(GridWorld::new(GridConfig { reward_noise: -0.1, ..det() }, 0).is_err());
        let mut env = GridWorld::new(det(), 0).unwrap();
        env.reset();
        assert!(env.step(4).is_err());
    }

    #[test]
    fn reward_noise_mean() {
        let cfg = GridConfig { reward_noise: 1.0, max_steps: 1000, ..det() };
        let mut env = GridWorld::new(cfg, 42).unwrap();
        env.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let n = 100_000;
        for _ in 0..n {
            if env.is_done() {
                env.reset();
            }
            let s = env.step(rng.random_range(0..NUM_ACTIONS)).unwrap();
            total += s.transition.reward - s.true_reward;
        }
        assert!((total / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn sticky_rate() {
        let cfg = GridConfig { sticky_prob: 0.25, max_steps: 1000, ..det() };
        let mut env = GridWorld::new(cfg, 7).unwrap();
        env.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut sticky, mut eligible) = (0usize, 0usize);
        for _ in 0..100_000 {
            if env.is_done() {
                env.reset();
                // first step after reset has no previous action
                env.step(rng.random_range(0..NUM_ACTIONS)).unwrap();
                continue;
            }
            eligible += 1;
            if env.step(rng.random_range(0..NUM_ACTIONS)).unwrap().sticky {
                sticky += 1;
            }
        }
        let rate = sticky as f64 / eligible as f64;
        assert!((rate - 0.25).abs() < 0.01, "{rate}");
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = GridConfig { sticky_prob: 0.25, reward_noise: 0.3, ..det() };
        let run = || {
            let mut env = GridWorld::new(cfg.clone(), 5).unwrap();
            env.reset();
            let mut out = Vec::new();
            for i in 0..60 {
                if env.is_done() {
                    env.reset();
                }
                out.push(env.step(i % 4).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn value_iteration_one_step_backup() {
        let q = tabular_value_iteration(&det(), 0.99).unwrap();
        assert_eq!(q.q(Cell::new(4, 3), 1), 1.0);
        assert_eq!(q.q(Cell::new(3, 4), 2), 1.0);
        assert!(q.bellman_residual(0.99) < 1e-10);
    }

    #[test]
    fn value_iteration_gamma_zero_is_immediate_reward() {
        let cfg = det();
        let q = tabular_value_iteration(&cfg, 0.0).unwrap();
        for i in 0..cfg.num_cells() {
            let c = cfg.cell_at(i);
            if c == cfg.goal {
                continue;
            }
            for a in 0..NUM_ACTIONS {
                assert_eq!(q.q(c, a), cfg.base_reward(cfg.next_cell(c, a)));
            }
        }
    }

    #[test]
    fn value_iteration_matches_shortest_path_sum() {
        let cfg = det();
        let gamma: f64 = 0.99;
        let q = tabular_value_iteration(&cfg, gamma).unwrap();
        for i in 0..cfg.num_cells() {
            let c = cfg.cell_at(i);
            if c == cfg.goal {
                continue;
            }
            let d = (cfg.goal.row - c.row) + (cfg.goal.col - c.col);
            let mut v = 0.0;
            for k in 0..d - 1 {
                v += gamma.powi(k as i32) * cfg.step_reward;
            }
            v += gamma.powi(d as i32 - 1) * cfg.goal_reward;
            assert!((q.value(c) - v).abs() < 1e-10);
        }
    }

    #[test]
    fn value_iteration_rejects_stochastic_grid() {
        let cfg = GridConfig { sticky_prob: 0.25, ..det() };
        assert!(matches!(
            tabular_value_iteration(&cfg, 0.9),
            Err(Error::NonDeterministicEnv)
        ));
    }

    #[test]
    fn policy_evaluation_of_greedy_policy_is_optimal() {
        let cfg = det();
        let q = tabular_value_iteration(&cfg, 0.9).unwrap();
        let pe = tabular_policy_evaluation(&cfg, 0.9, |c| {
            let mut p = [0.0; NUM_ACTIONS];
            p[q.greedy(c)] = 1.0;
            p
        })
        .unwrap();
        for i in 0..cfg.num_cells() {
            for a in 0..NUM_ACTIONS {
                let c = cfg.cell_at(i);
                assert!((pe.q(c, a) - q.q(c, a)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn optimal_and_random_returns() {
        let cfg = det();
        assert_eq!(optimal_return(&cfg, 0.99).unwrap(), -7.0 + 1.0);
        let r = random_policy_return(&cfg, 200, 0).unwrap();
        assert!(r < -6.0);
    }

    #[test]
    fn synthetic_targets() {
        let cfg = SyntheticConfig { dataset_size: 256, ..Default::default() };
        let t0 = SyntheticTask::new(&cfg, 1, 2, 0.0).unwrap();
        let t32 = SyntheticTask::new(&cfg, 1, 2, 32.0).unwrap();
        let y0 = t0.targets();
        let y32 = t32.targets();
        assert!(y0.iter().all(|y| (-1.0..=1.0).contains(y)));
        assert!(y32.iter().all(|y| (31.0..=33.0).contains(y)));
        for (a, b) in y0.iter().zip(&y32) {
            assert!(((b - a) - 32.0).abs() < 1e-12);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let (xa, ya) = t0.synthetic_batch(64, &mut r1).unwrap();
        let (xb, yb) = t0.synthetic_batch(64, &mut r2).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(ya, yb);
        assert!(t0.synthetic_batch(257, &mut r1).is_err());
        assert_eq!(t0.synthetic_batch(256, &mut r1).unwrap().1.len(), 256);
    }
}
