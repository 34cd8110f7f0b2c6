//! Online ring-buffer replay and fixed offline datasets.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{GridConfig, GridWorld, QTable, Transition, NUM_ACTIONS};
use crate::error::{Error, Result};

/// Anything transitions can be drawn from uniformly with replacement.
pub trait TransitionSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> &Transition;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample<'a, R: Rng + ?Sized>(&'a self, batch_size: usize, rng: &mut R) -> Result<Vec<&'a Transition>> {
        if self.len() < batch_size || self.is_empty() {
            return Err(Error::Underfilled {
                requested: batch_size,
                available: self.len(),
            });
        }
        Ok((0..batch_size)
            .map(|_| self.get(rng.random_range(0..self.len())))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    /// Slot the next push writes to once the buffer is full.
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter {
                name: "capacity",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Contents from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.storage.split_at(self.cursor);
        older.iter().chain(newer.iter())
    }

    /// Sample with the buffer's own seeded generator.
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<Transition>> {
        let mut rng = self.rng.clone();
        let out = self
            .sample(batch_size, &mut rng)?
            .into_iter()
            .cloned()
            .collect();
        self.rng = rng;
        Ok(out)
    }
}

impl TransitionSource for ReplayBuffer {
    fn len(&self) -> usize {
        self.storage.len()
    }

    fn get(&self, index: usize) -> &Transition {
        &self.storage[index]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_hash: String,
    pub policy: String,
    pub reward_noise: f64,
    pub state_dim: usize,
    pub num_actions: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Immutable set of logged transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    transitions: Vec<Transition>,
    meta: DatasetMeta,
}

impl TransitionSource for OfflineDataset {
    fn len(&self) -> usize {
        self.transitions.len()
    }

    fn get(&self, index: usize) -> &Transition {
        &self.transitions[index]
    }
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, meta: DatasetMeta) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Empty("offline dataset"));
        }
        for t in &transitions {
            if t.action >= meta.num_actions || t.next_action.is_some_and(|a| a >= meta.num_actions) {
                return Err(Error::ActionOutOfRange {
                    action: t.action.max(t.next_action.unwrap_or(0)),
                    num_actions: meta.num_actions,
                });
            }
            if t.state.len() != meta.state_dim || t.next_state.len() != meta.state_dim {
                return Err(Error::Shape {
                    expected: format!("state dim {}", meta.state_dim),
                    got: t.state.len().to_string(),
                });
            }
            if !t.reward.is_finite() {
                return Err(Error::NonFinite("dataset reward"));
            }
        }
        Ok(Self { transitions, meta })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Actions that never appear as the logged action.
    pub fn missing_actions(&self) -> Vec<usize> {
        let mut seen = vec![false; self.meta.num_actions];
        for t in &self.transitions {
            seen[t.action] = true;
        }
        (0..self.meta.num_actions).filter(|&a| !seen[a]).collect()
    }

    /// SHA-256 of the canonical line encoding of every transition.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.transitions {
            h.update(encode_line(t).as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One JSON header line, then one comma-separated line per transition:
    /// `state..., action, reward, next_state..., next_action, terminal`,
    /// with `-1` for a missing next action.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", serde_json::to_string(&self.meta)?)?;
        for t in &self.transitions {
            writeln!(w, "{}", encode_line(t))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let fmt_err = |line: usize, reason: String| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {line}: {reason}"),
        };
        let header = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))??;
        let meta: DatasetMeta =
            serde_json::from_str(&header).map_err(|e| fmt_err(1, e.to_string()))?;
        let mut transitions = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(decode_line(&line, meta.state_dim).map_err(|r| fmt_err(i + 2, r))?);
        }
        Self::new(transitions, meta)
    }
}

fn encode_line(t: &Transition) -> String {
    let mut s = String::new();
    for v in &t.state {
        write!(s, "{v},").unwrap();
    }
    write!(s, "{},{},", t.action, t.reward).unwrap();
    for v in &t.next_state {
        write!(s, "{v},").unwrap();
    }
    let next = t.next_action.map_or(-1, |a| a as i64);
    write!(s, "{next},{}", u8::from(t.terminal)).unwrap();
    s
}

fn decode_line(line: &str, state_dim: usize) -> std::result::Result<Transition, String> {
    let fields: Vec<&str> = line.split(',').collect();
    let want = 2 * state_dim + 4;
    if fields.len() != want {
        return Err(format!("expected {want} fields, found {}", fields.len()));
    }
    let float = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let int = |s: &str| s.trim().parse::<i64>().map_err(|e| format!("{s:?}: {e}"));
    let state = fields[..state_dim].iter().map(|s| float(s)).collect::<std::result::Result<Vec<_>, _>>()?;
    let action = int(fields[state_dim])?;
    let reward = float(fields[state_dim + 1])?;
    let next_state = fields[state_dim + 2..2 * state_dim + 2]
        .iter()
        .map(|s| float(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let next_action = int(fields[2 * state_dim + 2])?;
    let terminal = match fields[2 * state_dim + 3].trim() {
        "0" => false,
        "1" => true,
        other => return Err(format!("bad terminal flag {other:?}")),
    };
    if action < 0 {
        return Err("negative action".into());
    }
    Ok(Transition {
        state,
        action: action as usize,
        reward,
        next_state,
        next_action: (next_action >= 0).then_some(next_action as usize),
        terminal,
    })
}

/// Behaviour policy used to log an offline dataset.
#[derive(Debug, Clone)]
pub enum CollectionPolicy {
    Uniform,
    /// Greedy in `q` with probability `1 - epsilon`, uniform otherwise.
    EpsilonGreedy { q: QTable, epsilon: f64 },
}

impl CollectionPolicy {
    pub fn tag(&self) -> String {
        match self {
            CollectionPolicy::Uniform => "uniform".into(),
            CollectionPolicy::EpsilonGreedy { epsilon, .. } => format!("eps_greedy_{epsilon}"),
        }
    }

    /// Action probabilities at a cell.
    pub fn probs(&self, cell: crate::env::Cell) -> [f64; NUM_ACTIONS] {
        match self {
            CollectionPolicy::Uniform => [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS],
            CollectionPolicy::EpsilonGreedy { q, epsilon } => {
                let mut p = [epsilon / NUM_ACTIONS as f64; NUM_ACTIONS];
                p[q.greedy(cell)] += 1.0 - epsilon;
                p
            }
        }
    }

    fn act<R: Rng + ?Sized>(&self, cell: crate::env::Cell, rng: &mut R) -> usize {
        match self {
            CollectionPolicy::Uniform => rng.random_range(0..NUM_ACTIONS),
            CollectionPolicy::EpsilonGreedy { q, epsilon } => {
                if rng.random::<f64>() < *epsilon {
                    rng.random_range(0..NUM_ACTIONS)
                } else {
                    q.greedy(cell)
                }
            }
        }
    }
}

pub fn env_hash(cfg: &GridConfig) -> String {
    let json = serde_json::to_string(cfg).expect("grid config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Roll out `policy` for `episodes` episodes, logging every transition
/// with the successor action the policy actually took. When an episode is
/// cut by the step limit, the successor action is drawn from the policy at
/// the final state so SARSA targets stay defined.
pub fn collect_offline(
    cfg: &GridConfig,
    policy: &CollectionPolicy,
    episodes: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if episodes == 0 {
        return Err(Error::InvalidParameter {
            name: "episodes",
            reason: "must be at least 1".into(),
        });
    }
    let mut env = GridWorld::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5bd1_e995));
    let mut transitions = Vec::new();
    for _ in 0..episodes {
        env.reset();
        let mut action = policy.act(env.position(), &mut rng);
        loop {
            let step = env.step(action)?;
            let mut t = step.transition;
            if t.terminal {
                transitions.push(t);
                break;
            }
            let next = policy.act(env.position(), &mut rng);
            t.next_action = Some(next);
            transitions.push(t);
            if step.done {
                break;
            }
            action = next;
        }
    }
    OfflineDataset::new(
        transitions,
        DatasetMeta {
            env_hash: env_hash(cfg),
            policy: policy.tag(),
            reward_noise: cfg.reward_noise,
            state_dim: cfg.state_dim(),
            num_actions: NUM_ACTIONS,
            episodes,
            seed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{tabular_value_iteration, Cell};

    fn tr(tag: f64) -> Transition {
        Transition {
            state: vec![tag],
            action: 0,
            reward: tag,
            next_state: vec![tag],
            next_action: None,
            terminal: false,
        }
    }

    #[test]
    fn push_and_evict() {
        let mut b = ReplayBuffer::new(3, 0).unwrap();
        b.push(tr(0.0));
        assert_eq!(b.len(), 1);
        for i in 1..4 {
            b.push(tr(i as f64));
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = b.iter_ordered().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn contents_follow_insertion_order() {
        let mut b = ReplayBuffer::new(10, 0).unwrap();
        for i in 0..7 {
            b.push(tr(i as f64));
        }
        let rewards: Vec<f64> = b.iter_ordered().map(|t| t.reward).collect();
        assert_eq!(rewards, (0..7).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn sampling() {
        let mut b = ReplayBuffer::new(4, 9).unwrap();
        assert!(matches!(b.sample_batch(1), Err(Error::Underfilled { .. })));
        b.push(tr(5.0));
        assert_eq!(b.sample_batch(1).unwrap()[0].reward, 5.0);
        assert!(b.sample_batch(2).is_err());

        let mut a = ReplayBuffer::new(4, 9).unwrap();
        let mut c = ReplayBuffer::new(4, 9).unwrap();
        for i in 0..4 {
            a.push(tr(i as f64));
            c.push(tr(i as f64));
        }
        for _ in 0..5 {
            assert_eq!(a.sample_batch(3).unwrap(), c.sample_batch(3).unwrap());
        }
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(2, 1).unwrap();
        b.push(tr(0.0));
        b.push(tr(1.0));
        let n = 1_000_000;
        let mut ones = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..n {
            ones += usize::from(b.sample(1, &mut rng).unwrap()[0].reward == 1.0);
        }
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn greedy_optimal_collection_is_shortest_path() {
        let cfg = GridConfig::default();
        let q = tabular_value_iteration(&cfg, 0.99).unwrap();
        let policy = CollectionPolicy::EpsilonGreedy { q, epsilon: 0.0 };
        let d = collect_offline(&cfg, &policy, 1, 0).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.transitions().last().unwrap().terminal);
        let total: f64 = d.transitions().iter().map(|t| t.reward).sum();
        assert_eq!(total, -6.0);
    }

    #[test]
    fn uniform_collection_covers_grid_and_is_sarsa_consistent() {
        // no step limit inside the episodes, so consecutive rows share an episode
        let cfg = GridConfig { max_steps: 100_000, ..GridConfig::default() };
        let d = collect_offline(&cfg, &CollectionPolicy::Uniform, 200, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in d.transitions() {
            seen.insert((cfg.decode(&t.state).unwrap(), t.action));
        }
        // every non-goal cell with every action
        assert_eq!(seen.len(), (cfg.num_cells() - 1) * NUM_ACTIONS);
        assert!(d.missing_actions().is_empty());
        for pair in d.transitions().windows(2) {
            if !pair[0].terminal {
                assert_eq!(pair[0].next_state, pair[1].state);
                assert_eq!(pair[0].next_action, Some(pair[1].action));
            }
        }
        for t in d.transitions() {
            assert_eq!(t.terminal, t.next_action.is_none());
            assert_eq!(t.reward, cfg.base_reward(cfg.decode(&t.next_state).unwrap()));
        }
    }

    #[test]
    fn noisy_rewards_recorded() {
        let cfg = GridConfig { reward_noise: 0.3, ..GridConfig::default() };
        let d = collect_offline(&cfg, &CollectionPolicy::Uniform, 20, 3).unwrap();
        assert_eq!(d.meta().reward_noise, 0.3);
        for t in d.transitions() {
            let base = cfg.base_reward(cfg.decode(&t.next_state).unwrap());
            assert!(t.reward >= base && t.reward <= base + 0.3);
        }
    }

    #[test]
    fn save_load_preserves_content_hash() {
        let cfg = GridConfig { reward_noise: 1.0, ..GridConfig::default() };
        let d = collect_offline(&cfg, &CollectionPolicy::Uniform, 5, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        d.save(&path).unwrap();
        let back = OfflineDataset::load(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash(), d.content_hash());
        assert_eq!(
            collect_offline(&cfg, &CollectionPolicy::Uniform, 5, 11).unwrap().content_hash(),
            d.content_hash()
        );
    }

    #[test]
    fn load_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        let d = collect_offline(&GridConfig::default(), &CollectionPolicy::Uniform, 1, 0).unwrap();
        d.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("1,2,3\n");
        std::fs::write(&path, text).unwrap();
        let err = OfflineDataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("expected 24 fields"), "{err}");
    }

    #[test]
    fn rejects_zero_episodes_and_empty() {
        let cfg = GridConfig::default();
        assert!(collect_offline(&cfg, &CollectionPolicy::Uniform, 0, 0).is_err());
        let _ = Cell::new(0, 0);
    }
}
