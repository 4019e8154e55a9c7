//! Context detection, the finite-state context predictor and the
//! adaptation-speed bookkeeping that feeds the AS constraint.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::risk_level;

/// Number of ordinal levels per context axis.
pub const LEVELS: u8 = 3;
/// Number of distinct contexts (`LEVELS^3`).
pub const NUM_CONTEXTS: usize = 27;

/// Safety-relevant operating condition: traffic density, driver
/// aggressiveness and sensing-noise regime, each in `{0, 1, 2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub density: u8,
    pub behavior: u8,
    pub noise: u8,
}

impl Context {
    /// Builds a context, returning `None` if any level is out of range.
    pub fn new(density: u8, behavior: u8, noise: u8) -> Option<Self> {
        if density < LEVELS && behavior < LEVELS && noise < LEVELS {
            Some(Self { density, behavior, noise })
        } else {
            None
        }
    }

    pub fn index(self) -> usize {
        self.density as usize * 9 + self.behavior as usize * 3 + self.noise as usize
    }

    pub fn from_index(idx: usize) -> Self {
        assert!(idx < NUM_CONTEXTS, "context index {idx} out of range");
        Self {
            density: (idx / 9) as u8,
            behavior: ((idx / 3) % 3) as u8,
            noise: (idx % 3) as u8,
        }
    }

    /// All 27 contexts in index order.
    pub fn all() -> impl Iterator<Item = Context> {
        (0..NUM_CONTEXTS).map(Context::from_index)
    }

    pub fn levels(self) -> [u8; 3] {
        [self.density, self.behavior, self.noise]
    }

    pub fn from_levels(levels: [u8; 3]) -> Option<Self> {
        Self::new(levels[0], levels[1], levels[2])
    }

    pub fn level_sum(self) -> u8 {
        self.density + self.behavior + self.noise
    }

    /// Contexts at L1 distance exactly one (one axis moved by one level).
    pub fn neighbors(self) -> Vec<Context> {
        let levels = self.levels();
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            for delta in [-1i8, 1] {
                let v = levels[axis] as i8 + delta;
                if (0..LEVELS as i8).contains(&v) {
                    let mut l = levels;
                    l[axis] = v as u8;
                    out.push(Context::from_levels(l).expect("level in range"));
                }
            }
        }
        out
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.density, self.behavior, self.noise)
    }
}

/// Per-axis weights of the context discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyWeights {
    pub density: f64,
    pub behavior: f64,
    pub noise: f64,
}

impl Default for DiscrepancyWeights {
    fn default() -> Self {
        Self { density: 1.0, behavior: 1.0, noise: 1.0 }
    }
}

/// Weighted L1 distance over ordinal levels.
pub fn context_discrepancy_weighted(a: Context, b: Context, w: &DiscrepancyWeights) -> f64 {
    let diff = |x: u8, y: u8| (x as f64 - y as f64).abs();
    w.density * diff(a.density, b.density)
        + w.behavior * diff(a.behavior, b.behavior)
        + w.noise * diff(a.noise, b.noise)
}

/// Unit-weight discrepancy.
pub fn context_discrepancy(a: Context, b: Context) -> f64 {
    context_discrepancy_weighted(a, b, &DiscrepancyWeights::default())
}

/// Forecast of the next `horizon` contexts plus the derived risk level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextForecast {
    pub horizon: usize,
    pub sequence: Vec<Context>,
    pub risk: f64,
}

impl ContextForecast {
    pub fn new(sequence: Vec<Context>) -> Self {
        assert!(!sequence.is_empty(), "forecast needs at least one step");
        let risk = risk_level(&sequence);
        Self { horizon: sequence.len(), sequence, risk }
    }

    /// A constant forecast, used by baselines that ignore prediction.
    pub fn persistent(current: Context, horizon: usize) -> Self {
        Self::new(vec![current; horizon.max(1)])
    }

    pub fn last(&self) -> Context {
        *self.sequence.last().expect("non-empty forecast")
    }
}

/// Empirical context-transition counts with a persistence pseudo-count.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    counts: Vec<[u64; NUM_CONTEXTS]>,
    self_prior: f64,
}

impl TransitionModel {
    pub fn new(self_prior: f64) -> Self {
        assert!(self_prior >= 0.0 && self_prior.is_finite(), "self_prior must be a finite non-negative value");
        Self { counts: vec![[0; NUM_CONTEXTS]; NUM_CONTEXTS], self_prior }
    }

    pub fn self_prior(&self) -> f64 {
        self.self_prior
    }

    pub fn count(&self, from: Context, to: Context) -> u64 {
        self.counts[from.index()][to.index()]
    }

    pub fn row_total(&self, from: Context) -> u64 {
        self.counts[from.index()].iter().sum()
    }

    pub fn update(&mut self, prev: Context, next: Context) {
        self.counts[prev.index()][next.index()] += 1;
    }

    /// Directly set a count; used to seed a model from known statistics.
    pub fn set_count(&mut self, from: Context, to: Context, value: u64) {
        self.counts[from.index()][to.index()] = value;
    }

    /// Smoothed transition probability. A row with no mass at all
    /// degenerates to a pure self-transition.
    pub fn probability(&self, from: Context, to: Context) -> f64 {
        let mass = self.row_total(from) as f64 + self.self_prior;
        if mass <= 0.0 {
            return if from == to { 1.0 } else { 0.0 };
        }
        let prior = if from == to { self.self_prior } else { 0.0 };
        (self.count(from, to) as f64 + prior) / mass
    }

    /// Most likely successor; ties go to the lowest context index.
    pub fn most_likely_next(&self, from: Context) -> Context {
        if self.row_total(from) as f64 + self.self_prior <= 0.0 {
            return from;
        }
        let row = &self.counts[from.index()];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (dst, &c) in row.iter().enumerate() {
            let score = c as f64 + if dst == from.index() { self.self_prior } else { 0.0 };
            if score > best_score {
                best = dst;
                best_score = score;
            }
        }
        Context::from_index(best)
    }

    /// Greedy most-likely rollout over `horizon` steps.
    pub fn predict(&self, current: Context, horizon: usize) -> ContextForecast {
        assert!(horizon >= 1, "forecast horizon must be at least 1");
        let mut seq = Vec::with_capacity(horizon);
        let mut c = current;
        for _ in 0..horizon {
            c = self.most_likely_next(c);
            seq.push(c);
        }
        ContextForecast::new(seq)
    }
}

/// Required adaptation speed: discrepancy between the end of the forecast
/// and the current context, per forecast step.
pub fn required_speed(forecast: &ContextForecast, current: Context, w: &DiscrepancyWeights) -> f64 {
    context_discrepancy_weighted(forecast.last(), current, w) / forecast.horizon as f64
}

pub fn adaptation_ratio(v_req: f64, v_cap: f64, epsilon: f64) -> f64 {
    debug_assert!(v_cap > 0.0 && epsilon > 0.0);
    v_req / (v_cap + epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub shift: f64,
    pub steps: u32,
}

/// Estimate of the achievable adaptation speed from recent recoveries.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationState {
    window: VecDeque<Recovery>,
    window_size: usize,
    default_cap: f64,
    v_cap: f64,
}

impl AdaptationState {
    pub fn new(window_size: usize, default_cap: f64) -> Self {
        assert!(default_cap > 0.0, "default capacity must be positive");
        assert!(window_size >= 1);
        Self { window: VecDeque::with_capacity(window_size), window_size, default_cap, v_cap: default_cap }
    }

    pub fn v_cap(&self) -> f64 {
        self.v_cap
    }

    pub fn window(&self) -> impl Iterator<Item = &Recovery> {
        self.window.iter()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Records the outcome of a context shift. Shifts that needed the
    /// fallback (or never recovered) leave the window untouched.
    pub fn update(&mut self, shift: f64, steps_to_recover: u32, recovered_without_fallback: bool) {
        assert!(shift >= 0.0);
        if recovered_without_fallback {
            if self.window.len() == self.window_size {
                self.window.pop_front();
            }
            self.window.push_back(Recovery { shift, steps: steps_to_recover.max(1) });
        }
        let best = self
            .window
            .iter()
            .map(|r| r.shift / r.steps as f64)
            .fold(0.0f64, f64::max);
        self.v_cap = if best > 0.0 { best } else { self.default_cap };
    }
}

/// Tracks one pending context shift until the safety layer executes the
/// policy's own action from a non-empty admissible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryTracker {
    shift: f64,
    steps: u32,
}

impl RecoveryTracker {
    pub fn start(shift: f64) -> Self {
        Self { shift, steps: 0 }
    }

    /// Advances by one step. Returns `Some((shift, steps))` once recovered.
    pub fn observe(&mut self, admissible_nonempty: bool, fallback_used: bool) -> Option<(f64, u32)> {
        self.steps += 1;
        (admissible_nonempty && !fallback_used).then_some((self.shift, self.steps))
    }
}

/// One entry of the interaction history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub front_gap: f64,
    pub speed: f64,
    pub action: u8,
    pub reward: f64,
    pub cost: f64,
    pub context: Context,
    pub fallback: bool,
    pub violation: bool,
}

/// Bounded, time-ordered interaction history.
#[derive(Debug, Clone)]
pub struct InteractionHistory {
    records: VecDeque<HistoryRecord>,
    capacity: usize,
}

impl InteractionHistory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self { records: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, rec: HistoryRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &HistoryRecord> {
        self.records.iter()
    }

    pub fn recent_violations(&self, last: usize) -> usize {
        self.records.iter().rev().take(last).filter(|r| r.violation).count()
    }
}

/// Reads the simulator context through a noisy channel. A burst of at
/// least two violations in the last five records pins the estimate to the
/// true context.
pub fn detect_context<R: Rng + ?Sized>(
    history: &InteractionHistory,
    true_context: Context,
    noise_prob: f64,
    rng: &mut R,
) -> Context {
    debug_assert!((0.0..=1.0).contains(&noise_prob));
    if history.recent_violations(5) >= 2 {
        return true_context;
    }
    if noise_prob <= 0.0 || !rng.random_bool(noise_prob.min(1.0)) {
        return true_context;
    }
    let options = true_context.neighbors();
    options[rng.random_range(0..options.len())]
}
