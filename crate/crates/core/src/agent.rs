//! Learning backbones: a context-conditioned tabular Q-learner trained on
//! the penalized objective, and a fixed rule-based driver.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintEval;
use crate::context::{Context, NUM_CONTEXTS};
use crate::env::{Action, Observation, NUM_ACTIONS};
use crate::Error;

const GAP_EDGES: [f64; 4] = [5.0, 10.0, 20.0, 40.0];
const TTC_EDGES: [f64; 3] = [1.0, 2.0, 4.0];
const SPEED_EDGES: [f64; 3] = [10.0, 20.0, 30.0];

pub const NUM_KEYS: usize = 5 * 4 * 2 * 4 * NUM_CONTEXTS;

fn bin(value: f64, edges: &[f64]) -> u8 {
    edges.iter().filter(|e| value >= **e).count() as u8
}

/// Discretized observation plus detected context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteObsKey {
    pub front_gap: u8,
    pub ttc: u8,
    pub merge_zone: bool,
    pub speed: u8,
    pub context: u8,
}

impl DiscreteObsKey {
    pub fn new(obs: &Observation, context: Context) -> Self {
        Self {
            front_gap: bin(obs.front_gap, &GAP_EDGES),
            ttc: bin(obs.ttc, &TTC_EDGES),
            merge_zone: obs.in_merge_zone,
            speed: bin(obs.speed, &SPEED_EDGES),
            context: context.index() as u8,
        }
    }

    pub fn index(&self) -> usize {
        let mut i = self.front_gap as usize;
        i = i * 4 + self.ttc as usize;
        i = i * 2 + self.merge_zone as usize;
        i = i * 4 + self.speed as usize;
        i * NUM_CONTEXTS + self.context as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        if idx >= NUM_KEYS {
            return None;
        }
        let context = (idx % NUM_CONTEXTS) as u8;
        let r = idx / NUM_CONTEXTS;
        Some(Self {
            speed: (r % 4) as u8,
            merge_zone: (r / 4) % 2 == 1,
            ttc: ((r / 8) % 4) as u8,
            front_gap: (r / 32) as u8,
            context,
        })
    }
}

/// `agent.*` configuration keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub lr: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_episodes: usize,
    pub eps_eval: f64,
    pub lambda: f64,
    pub train_episodes: usize,
    /// Initial value of every Q entry.
    pub q_init: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            gamma: 0.95,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_episodes: 250,
            eps_eval: 0.0,
            lambda: 5.0,
            train_episodes: 300,
            q_init: 0.0,
        }
    }
}

impl AgentParams {
    /// Linear decay from `eps_start` to `eps_end`.
    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.eps_decay_episodes == 0 || episode >= self.eps_decay_episodes {
            return self.eps_end;
        }
        let frac = episode as f64 / self.eps_decay_episodes as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    values: Vec<[f64; NUM_ACTIONS]>,
    init: f64,
    pub lr: f64,
    pub gamma: f64,
}

impl QFunction {
    pub fn new(lr: f64, gamma: f64) -> Self {
        Self::with_init(lr, gamma, 0.0)
    }

    /// Every entry starts at `init`. An optimistic start makes untried
    /// actions look better than ones that ended an episode early.
    pub fn with_init(lr: f64, gamma: f64, init: f64) -> Self {
        Self { values: vec![[init; NUM_ACTIONS]; NUM_KEYS], init, lr, gamma }
    }

    pub fn row(&self, key: &DiscreteObsKey) -> &[f64; NUM_ACTIONS] {
        &self.values[key.index()]
    }

    pub fn set(&mut self, key: &DiscreteObsKey, action: Action, value: f64) {
        self.values[key.index()][action.id()] = value;
    }

    pub fn get(&self, key: &DiscreteObsKey, action: Action) -> f64 {
        self.values[key.index()][action.id()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// One-step Q-learning toward `shaped + gamma * max Q(next)`.
    pub fn update(&mut self, key: &DiscreteObsKey, action: Action, shaped_reward: f64, next: &DiscreteObsKey, terminal: bool) {
        let bootstrap = if terminal { 0.0 } else { self.gamma * max_value(self.row(next)) };
        let q = &mut self.values[key.index()][action.id()];
        *q += self.lr * (shaped_reward + bootstrap - *q);
    }

    /// Flat `key action value` lines for entries that moved away from the
    /// initial value, after an `init <value>` line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# key action value\ninit {}\n", self.init);
        for (k, row) in self.values.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                if *v != self.init {
                    writeln!(out, "{k} {} {v}", Action::ALL[a].name()).expect("write to string");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str, lr: f64, gamma: f64) -> Result<Self, Error> {
        let mut q = Self::new(lr, gamma);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("q-table line {}: `{line}`", lineno + 1));
            if let Some(init) = line.strip_prefix("init ") {
                let init: f64 = init.trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(bad)?;
                q = Self::with_init(lr, gamma, init);
                continue;
            }
            let mut parts = line.split_whitespace();
            let key: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let action: Action = parts.next().ok_or_else(bad)?.parse()?;
            let value: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if key >= NUM_KEYS || parts.next().is_some() || !value.is_finite() {
                return Err(bad());
            }
            q.values[key][action.id()] = value;
        }
        Ok(q)
    }
}

fn max_value(row: &[f64; NUM_ACTIONS]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Greedy action with ties going to the lowest action id.
pub fn greedy(row: &[f64; NUM_ACTIONS]) -> Action {
    let mut best = 0;
    for a in 1..NUM_ACTIONS {
        if row[a] > row[best] {
            best = a;
        }
    }
    Action::ALL[best]
}

pub fn select_action(q: &QFunction, key: &DiscreteObsKey, epsilon: f64, rng: &mut impl Rng) -> Action {
    if epsilon > 0.0 && rng.random_bool(epsilon.min(1.0)) {
        Action::ALL[rng.random_range(0..NUM_ACTIONS)]
    } else {
        greedy(q.row(key))
    }
}

/// Sum of the positive parts of the three constraint values.
pub fn safety_loss(eval: &ConstraintEval) -> f64 {
    eval.g_cb.max(0.0) + eval.g_as.max(0.0) + eval.g_sh.max(0.0)
}

/// Reward minus the weighted safety loss.
pub fn shaped_reward(reward: f64, eval: Option<&ConstraintEval>, lambda: f64) -> f64 {
    match eval {
        Some(e) if lambda != 0.0 => reward - lambda * safety_loss(e),
        _ => reward,
    }
}

/// Rule-based driver used as the alternative backbone.
pub fn heuristic_policy(obs: &Observation) -> Action {
    if obs.ttc < 2.0 {
        Action::Slower
    } else if obs.in_merge_zone && obs.merge_gap > 10.0 {
        Action::LaneLeft
    } else if obs.front_gap > 40.0 && obs.speed < 30.0 {
        Action::Faster
    } else {
        Action::Idle
    }
}

/// The policy that proposes actions to the shield.
#[derive(Debug, Clone)]
pub enum Backbone {
    Tabular(QFunction),
    Heuristic,
}

impl Backbone {
    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Tabular(_) => "tabular",
            Backbone::Heuristic => "heuristic",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs() -> Observation {
        Observation {
            speed: 20.0,
            lane: 1,
            in_merge_zone: false,
            front_gap: 1000.0,
            front_closing: 0.0,
            ttc: 99.0,
            left_gap: 1000.0,
            left_closing: 0.0,
            right_gap: 1000.0,
            right_closing: 0.0,
            merge_gap: 1000.0,
            context_estimate: None,
        }
    }

    fn key() -> DiscreteObsKey {
        DiscreteObsKey::new(&obs(), Context::from_index(13))
    }

    #[test]
    fn key_space_is_dense() {
        for i in 0..NUM_KEYS {
            assert_eq!(DiscreteObsKey::from_index(i).unwrap().index(), i);
        }
        assert_eq!(NUM_KEYS, 5 * 4 * 2 * 4 * 27);
        assert_eq!(NUM_KEYS, 4320);
        assert!(DiscreteObsKey::from_index(NUM_KEYS).is_none());
    }

    #[test]
    fn binning_edges() {
        assert_eq!(bin(4.9, &GAP_EDGES), 0);
        assert_eq!(bin(5.0, &GAP_EDGES), 1);
        assert_eq!(bin(1000.0, &GAP_EDGES), 4);
        assert_eq!(bin(0.5, &TTC_EDGES), 0);
        assert_eq!(bin(35.0, &SPEED_EDGES), 3);
    }

    #[test]
    fn greedy_selection() {
        let mut q = QFunction::new(0.1, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = key();
        assert_eq!(select_action(&q, &k, 0.0, &mut rng), Action::LaneLeft);
        q.set(&k, Action::Idle, 1.0);
        assert_eq!(select_action(&q, &k, 0.0, &mut rng), Action::Idle);
    }

    #[test]
    fn uniform_exploration() {
        let q = QFunction::new(0.1, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; NUM_ACTIONS];
        for _ in 0..10_000 {
            counts[select_action(&q, &key(), 1.0, &mut rng).id()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn terminal_update() {
        let mut q = QFunction::new(0.5, 0.9);
        let k = key();
        q.update(&k, Action::Faster, 1.0, &k, true);
        assert_eq!(q.get(&k, Action::Faster), 0.5);
    }

    #[test]
    fn replay_converges_to_shaped_reward() {
        let mut q = QFunction::new(0.3, 0.9);
        let k = key();
        let e = ConstraintEval::from_parts(0.2, -1.0, 0.1, 0.0, 0.0);
        let r = shaped_reward(1.0, Some(&e), 2.0);
        assert!((r - 0.4).abs() < 1e-12);
        for _ in 0..200 {
            q.update(&k, Action::Idle, r, &k, true);
        }
        assert!((q.get(&k, Action::Idle) - r).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_plain_reward() {
        let e = ConstraintEval::from_parts(3.0, 3.0, 3.0, 0.0, 0.0);
        assert_eq!(shaped_reward(0.7, Some(&e), 0.0), 0.7);
        assert_eq!(shaped_reward(0.7, None, 5.0), 0.7);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(safety_loss(&ConstraintEval::from_parts(-1.0, -1.0, -1.0, 0.0, 0.0)), 0.0);
        let l = safety_loss(&ConstraintEval::from_parts(0.2, -1.0, 0.1, 0.0, 0.0));
        assert!((l - 0.3).abs() < 1e-12);
    }

    #[test]
    fn heuristic_rules() {
        let mut o = obs();
        assert_eq!(heuristic_policy(&o), Action::Faster);
        o.ttc = 1.5;
        assert_eq!(heuristic_policy(&o), Action::Slower);
        let mut o = obs();
        o.lane = 0;
        o.in_merge_zone = true;
        o.merge_gap = 15.0;
        assert_eq!(heuristic_policy(&o), Action::LaneLeft);
        let mut o = obs();
        o.front_gap = 30.0;
        assert_eq!(heuristic_policy(&o), Action::Idle);
    }

    #[test]
    fn text_roundtrip() {
        let mut q = QFunction::with_init(0.1, 0.9, 2.5);
        q.set(&key(), Action::Slower, -0.125);
        q.set(&DiscreteObsKey::from_index(7).unwrap(), Action::LaneRight, 3.5e-7);
        let back = QFunction::from_text(&q.to_text(), 0.1, 0.9).unwrap();
        assert_eq!(back, q);
        assert!(QFunction::from_text("99999 IDLE 1.0", 0.1, 0.9).is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let p = AgentParams::default();
        assert_eq!(p.epsilon(0), 1.0);
        assert_eq!(p.epsilon(10_000), p.eps_end);
        assert!(p.epsilon(100) < 1.0 && p.epsilon(100) > p.eps_end);
    }
}
