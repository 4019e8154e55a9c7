//! Nonstationary highway-merge simulator.
//!
//! The ego vehicle starts on an on-ramp (lane 0) and must move into the
//! rightmost highway lane (lane 1) inside the merge zone. Background
//! traffic follows an IDM car-following rule whose parameters, hazard
//! rates and spawn density are driven by the active [`Context`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraints::PredictedMargins;
use crate::context::{Context, NUM_CONTEXTS};
use crate::rng::stream;
use crate::Error;

/// Discrete meta-actions, in the usual driving-benchmark order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

pub const NUM_ACTIONS: usize = 5;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::LaneLeft, Action::Idle, Action::LaneRight, Action::Faster, Action::Slower];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self, Error> {
        Self::ALL.get(id).copied().ok_or(Error::InvalidAction(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::LaneLeft => "LANE_LEFT",
            Action::Idle => "IDLE",
            Action::LaneRight => "LANE_RIGHT",
            Action::Faster => "FASTER",
            Action::Slower => "SLOWER",
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Action::LaneLeft | Action::LaneRight)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown action `{s}`")))
    }
}

/// Evaluation condition controlling the context schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Stationary,
    Seen,
    Unseen,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Stationary, Condition::Seen, Condition::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Stationary => "stationary",
            Condition::Seen => "seen",
            Condition::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown condition `{s}`")))
    }
}

/// Simulator parameters (`env.*` configuration keys). Per-level arrays are
/// indexed by the relevant context level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub dt: f64,
    pub episode_length: usize,
    pub highway_lanes: u8,
    pub ego_start_speed: f64,
    pub v_max: f64,
    pub faster_delta: f64,
    pub slower_delta: f64,
    pub merge_zone_start: f64,
    pub merge_zone_end: f64,
    pub vehicle_length: f64,
    pub lane_change_clearance: f64,
    pub collision_gap: f64,
    pub ttc_hard: f64,
    pub ttc_cap: f64,
    pub gap_sentinel: f64,
    pub sensing_range: f64,
    pub clearance_cap: f64,
    pub reward_speed: f64,
    pub reward_lane_change: f64,
    pub merge_bonus: f64,
    pub window_behind: f64,
    pub window_ahead: f64,
    pub spawn_spacing: f64,
    pub vehicles_per_lane: [usize; 3],
    pub idm: IdmParams,
    pub hazards: HazardParams,
    pub noise: NoiseParams,
    pub switch_min: usize,
    pub switch_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub desired_speed: [f64; 3],
    pub time_headway: [f64; 3],
    pub min_gap: [f64; 3],
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub max_decel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazardParams {
    pub interaction_range: f64,
    pub brake_prob: [f64; 3],
    pub brake_decel: [f64; 3],
    pub brake_steps: u8,
    pub lane_change_prob: [f64; 3],
    pub lane_change_accept_gap: [f64; 3],
    /// Strongest braking a lane-changing driver may impose on itself or on
    /// its new follower in traffic (the ego is not protected).
    pub lane_change_safe_decel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub gap_sigma: [f64; 3],
    pub speed_sigma: [f64; 3],
    pub detect_prob: [f64; 3],
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            dt: 0.5,
            episode_length: 120,
            highway_lanes: 2,
            ego_start_speed: 20.0,
            v_max: 35.0,
            faster_delta: 2.0,
            slower_delta: 3.0,
            merge_zone_start: 80.0,
            merge_zone_end: 230.0,
            vehicle_length: 5.0,
            lane_change_clearance: 2.0,
            collision_gap: 1.0,
            ttc_hard: 1.0,
            ttc_cap: 99.0,
            gap_sentinel: 1000.0,
            sensing_range: 100.0,
            clearance_cap: 100.0,
            reward_speed: 0.4,
            reward_lane_change: 0.05,
            merge_bonus: 1.0,
            window_behind: 200.0,
            window_ahead: 400.0,
            spawn_spacing: 20.0,
            vehicles_per_lane: [3, 7, 12],
            idm: IdmParams::default(),
            hazards: HazardParams::default(),
            noise: NoiseParams::default(),
            switch_min: 40,
            switch_max: 60,
        }
    }
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: [24.0, 27.0, 30.0],
            time_headway: [1.6, 1.2, 0.8],
            min_gap: [3.0, 2.0, 1.2],
            max_accel: 1.5,
            comfort_decel: 2.0,
            max_decel: 9.0,
        }
    }
}

impl Default for HazardParams {
    fn default() -> Self {
        Self {
            interaction_range: 120.0,
            brake_prob: [0.002, 0.01, 0.03],
            brake_decel: [4.0, 6.0, 8.0],
            brake_steps: 3,
            lane_change_prob: [0.0, 0.01, 0.03],
            lane_change_accept_gap: [15.0, 8.0, 3.0],
            lane_change_safe_decel: 4.0,
        }
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gap_sigma: [0.0, 0.5, 1.5],
            speed_sigma: [0.0, 0.25, 0.75],
            detect_prob: [0.0, 0.05, 0.15],
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: &str| Err(Error::Config(format!("env: {msg}")));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.episode_length == 0 {
            return bad("episode_length must be positive");
        }
        if self.highway_lanes == 0 {
            return bad("at least one highway lane is required");
        }
        if !(self.merge_zone_start < self.merge_zone_end) {
            return bad("merge zone must have positive length");
        }
        if self.switch_min == 0 || self.switch_min > self.switch_max {
            return bad("switch_min must be in 1..=switch_max");
        }
        if !(self.ego_start_speed >= 0.0 && self.ego_start_speed <= self.v_max) {
            return bad("ego_start_speed must lie in [0, v_max]");
        }
        for p in self.hazards.brake_prob.iter().chain(&self.hazards.lane_change_prob).chain(&self.noise.detect_prob) {
            if !(0.0..=1.0).contains(p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.hazards.lane_change_safe_decel >= 0.0) {
            return bad("lane_change_safe_decel must be nonnegative");
        }
        Ok(())
    }
}

/// Interpolates a per-level table at a fractional level in `[0, 2]`.
fn lerp_level(table: &[f64; 3], level: f64) -> f64 {
    let l = level.clamp(0.0, 2.0);
    let i = (l.floor() as usize).min(1);
    let frac = l - i as f64;
    table[i] + (table[i + 1] - table[i]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ego {
    pub x: f64,
    pub lane: u8,
    pub speed: f64,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub x: f64,
    pub lane: u8,
    pub speed: f64,
    /// Behavior level plus a per-driver offset, in `[0, 2]`.
    pub aggressiveness: f64,
    pub offset: f64,
    pub brake_timer: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub time_step: usize,
    pub ego: Ego,
    pub traffic: Vec<Vehicle>,
    pub true_context: Context,
    pub episode_length: usize,
}

impl EnvState {
    pub fn merging_zone_active(&self, p: &EnvParams) -> bool {
        self.ego.lane == 0 && self.ego.x >= p.merge_zone_start && self.ego.x <= p.merge_zone_end
    }
}

/// Kinematic summary of the ego's surroundings.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Surroundings {
    front_gap: f64,
    closing: f64,
    ttc: f64,
    merge_gap: f64,
    collision: bool,
}

fn ttc_of(gap: f64, closing: f64, cap: f64) -> f64 {
    if gap <= 0.0 {
        1e-3
    } else if closing > 1e-9 {
        (gap / closing).min(cap)
    } else {
        cap
    }
}

/// Nearest vehicle ahead of `x` in `lane`, within the sensing range.
fn lead_in_lane(p: &EnvParams, traffic: &[Vehicle], lane: u8, x: f64) -> Option<(f64, f64)> {
    traffic
        .iter()
        .filter(|v| v.lane == lane && v.x >= x)
        .map(|v| (v.x - x - p.vehicle_length, v.speed))
        .filter(|(gap, _)| *gap <= p.sensing_range)
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Smallest bumper-to-bumper gap to any vehicle in `lane` around `x`.
fn min_abs_gap(p: &EnvParams, traffic: &[Vehicle], lane: u8, x: f64) -> f64 {
    traffic
        .iter()
        .filter(|v| v.lane == lane)
        .map(|v| ((v.x - x).abs() - p.vehicle_length).max(0.0))
        .fold(p.gap_sentinel, f64::min)
}

fn surroundings(p: &EnvParams, s: &EnvState) -> Surroundings {
    let ego = &s.ego;
    let (front_gap, closing) = match lead_in_lane(p, &s.traffic, ego.lane, ego.x) {
        Some((gap, lead_speed)) => (gap.max(0.0), ego.speed - lead_speed),
        None => (p.gap_sentinel, 0.0),
    };
    let collision = s
        .traffic
        .iter()
        .any(|v| v.lane == ego.lane && (v.x - ego.x).abs() - p.vehicle_length < p.collision_gap);
    let merge_lane = if ego.lane == 0 { 1 } else { ego.lane };
    Surroundings {
        front_gap,
        closing,
        ttc: ttc_of(front_gap, closing, p.ttc_cap),
        merge_gap: min_abs_gap(p, &s.traffic, merge_lane, ego.x),
        collision,
    }
}

/// Collision indicator plus graded TTC deficit.
fn step_cost(p: &EnvParams, sur: &Surroundings) -> f64 {
    let graded = ((p.ttc_hard - sur.ttc) / p.ttc_hard).max(0.0);
    graded + if sur.collision { 1.0 } else { 0.0 }
}

/// Applies the ego's action. Returns whether a lane change took effect.
fn apply_ego_action(p: &EnvParams, s: &mut EnvState, action: Action) -> bool {
    let zone = s.merging_zone_active(p);
    let ego = &mut s.ego;
    match action {
        Action::Faster => ego.speed = (ego.speed + p.faster_delta).clamp(0.0, p.v_max),
        Action::Slower => ego.speed = (ego.speed - p.slower_delta).clamp(0.0, p.v_max),
        Action::Idle => {}
        Action::LaneLeft | Action::LaneRight => {
            let target = match (action, ego.lane) {
                (Action::LaneLeft, 0) if zone => Some(1),
                (Action::LaneLeft, l) if l >= 1 && l < p.highway_lanes => Some(l + 1),
                (Action::LaneRight, l) if l >= 2 => Some(l - 1),
                _ => None,
            };
            if let Some(t) = target {
                let blocked = s
                    .traffic
                    .iter()
                    .any(|v| v.lane == t && (v.x - ego.x).abs() - p.vehicle_length < p.lane_change_clearance);
                if !blocked {
                    ego.lane = t;
                    return true;
                }
            }
        }
    }
    false
}

/// IDM acceleration of a driver at `x` behind an optional `(x, speed)` leader.
fn idm_accel(p: &EnvParams, x: f64, speed: f64, aggr: f64, lead: Option<(f64, f64)>) -> f64 {
    let idm = &p.idm;
    let v0 = lerp_level(&idm.desired_speed, aggr);
    let headway = lerp_level(&idm.time_headway, aggr);
    let s0 = lerp_level(&idm.min_gap, aggr);
    let free = 1.0 - (speed / v0).powi(4);
    match lead {
        Some((lx, ls)) => {
            let gap = (lx - x - p.vehicle_length).max(0.1);
            let desired =
                s0 + speed * headway + speed * (speed - ls) / (2.0 * (idm.max_accel * idm.comfort_decel).sqrt());
            idm.max_accel * (free - (desired.max(0.0) / gap).powi(2))
        }
        None => idm.max_accel * free,
    }
}

/// Advances traffic and ego positions by one step of IDM car following.
/// `behavior_override` replaces each driver's level with an assumed one.
fn advance(p: &EnvParams, s: &mut EnvState, behavior_override: Option<u8>) {
    let idm = &p.idm;
    let n = s.traffic.len();
    let mut accel = vec![0.0; n];
    for (i, v) in s.traffic.iter().enumerate() {
        let aggr = match behavior_override {
            Some(b) => (b as f64 + v.offset).clamp(0.0, 2.0),
            None => v.aggressiveness,
        };
        // leader among traffic and the ego
        let mut lead: Option<(f64, f64)> = None;
        let mut consider = |x: f64, speed: f64| {
            if x > v.x && lead.is_none_or(|(lx, _)| x < lx) {
                lead = Some((x, speed));
            }
        };
        for (j, o) in s.traffic.iter().enumerate() {
            if j != i && o.lane == v.lane {
                consider(o.x, o.speed);
            }
        }
        if s.ego.lane == v.lane {
            consider(s.ego.x, s.ego.speed);
        }
        let a = idm_accel(p, v.x, v.speed, aggr, lead);
        let mut a = a.clamp(-idm.max_decel, idm.max_accel);
        if behavior_override.is_none() && v.brake_timer > 0 {
            a = a.min(-lerp_level(&p.hazards.brake_decel, v.aggressiveness));
        }
        accel[i] = a;
    }
    for (v, a) in s.traffic.iter_mut().zip(accel) {
        let new_speed = (v.speed + a * p.dt).clamp(0.0, p.v_max);
        v.x += 0.5 * (v.speed + new_speed) * p.dt;
        v.speed = new_speed;
        if behavior_override.is_none() {
            v.brake_timer = v.brake_timer.saturating_sub(1);
        }
    }
    s.ego.x += s.ego.speed * p.dt;
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub cost: f64,
    pub hard_violation: bool,
    pub collision: bool,
    pub clearance_increment: f64,
    pub front_gap: f64,
    pub ttc: f64,
    pub merged_now: bool,
    pub terminated: bool,
}

/// Noisy ego-centric observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub speed: f64,
    pub lane: u8,
    pub in_merge_zone: bool,
    pub front_gap: f64,
    pub front_closing: f64,
    pub ttc: f64,
    pub left_gap: f64,
    pub left_closing: f64,
    pub right_gap: f64,
    pub right_closing: f64,
    pub merge_gap: f64,
    pub context_estimate: Option<Context>,
}

/// Held-out transitions: at least two axes jump by two levels at once.
pub fn is_held_out(from: Context, to: Context) -> bool {
    from.levels().iter().zip(to.levels()).filter(|(a, b)| a.abs_diff(*b) == 2).count() >= 2
}

/// Transitions the seen-condition generator may produce: one axis, one level.
pub fn is_seen_transition(from: Context, to: Context) -> bool {
    crate::context::context_discrepancy(from, to) == 1.0
}

/// Piecewise-constant context schedule for a whole episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSchedule {
    contexts: Vec<Context>,
}

impl ContextSchedule {
    /// Draws the schedule for one episode. `initial` overrides the drawn
    /// start context.
    pub fn generate(
        p: &EnvParams,
        condition: Condition,
        initial: Option<Context>,
        rng: &mut impl Rng,
    ) -> Self {
        let len = p.episode_length + 1;
        let start = initial.unwrap_or_else(|| match condition {
            Condition::Unseen => {
                let extreme = |rng: &mut dyn rand::RngCore| if rng.random_bool(0.5) { 2 } else { 0 };
                Context::new(extreme(rng), extreme(rng), extreme(rng)).expect("valid")
            }
            _ => Context::from_index(rng.random_range(0..NUM_CONTEXTS)),
        });
        let mut contexts = Vec::with_capacity(len);
        let mut current = start;
        let mut next_switch = rng.random_range(p.switch_min..=p.switch_max);
        for t in 0..len {
            if t == next_switch && condition != Condition::Stationary {
                current = match condition {
                    Condition::Seen => {
                        let n = current.neighbors();
                        n[rng.random_range(0..n.len())]
                    }
                    _ => held_out_jump(current, rng),
                };
                next_switch += rng.random_range(p.switch_min..=p.switch_max);
            }
            contexts.push(current);
        }
        Self { contexts }
    }

    pub fn constant(c: Context, len: usize) -> Self {
        Self { contexts: vec![c; len + 1] }
    }

    pub fn at(&self, t: usize) -> Context {
        self.contexts[t.min(self.contexts.len() - 1)]
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn transitions(&self) -> impl Iterator<Item = (Context, Context)> + '_ {
        self.contexts.windows(2).filter(|w| w[0] != w[1]).map(|w| (w[0], w[1]))
    }
}

/// Moves two axes by two levels. Axes at the middle level are first pushed
/// to an extreme so the jump stays held-out.
fn held_out_jump(c: Context, rng: &mut impl Rng) -> Context {
    let mut levels = c.levels();
    let first = rng.random_range(0..3);
    let second = (first + rng.random_range(1..3)) % 3;
    for axis in [first, second] {
        levels[axis] = match levels[axis] {
            0 => 2,
            2 => 0,
            _ => unreachable!("unseen schedules keep axes at extreme levels"),
        };
    }
    Context::from_levels(levels).expect("valid")
}

/// One simulator instance owning its state, schedule and random stream.
#[derive(Debug, Clone)]
pub struct MergeEnv {
    params: EnvParams,
    state: EnvState,
    schedule: ContextSchedule,
    condition: Condition,
    rng: ChaCha8Rng,
}

impl MergeEnv {
    pub fn new(params: EnvParams, condition: Condition, seed: u64) -> Self {
        Self::with_initial_context(params, condition, seed, None)
    }

    pub fn with_initial_context(
        params: EnvParams,
        condition: Condition,
        seed: u64,
        initial: Option<Context>,
    ) -> Self {
        let mut rng = stream(seed, 0x5eed_e417);
        let schedule = ContextSchedule::generate(&params, condition, initial, &mut rng);
        let state = spawn_initial(&params, schedule.at(0), &mut rng);
        Self { params, state, schedule, condition, rng }
    }

    /// Replaces the state and schedule, e.g. for hand-built scenarios.
    pub fn from_state(params: EnvParams, state: EnvState, schedule: ContextSchedule, seed: u64) -> Self {
        Self { params, state, schedule, condition: Condition::Stationary, rng: stream(seed, 0x5eed_e417) }
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn schedule(&self) -> &ContextSchedule {
        &self.schedule
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn step(&mut self, action: Action) -> StepOutcome {
        let out = step_state(&self.params, &self.state, &self.schedule, action, &mut self.rng);
        self.state = out.next_state.clone();
        out
    }

    pub fn predict_margins(&self, action: Action, assumed: Context) -> PredictedMargins {
        predict_margins(&self.params, &self.state, action, assumed)
    }
}

fn spawn_initial(p: &EnvParams, ctx: Context, rng: &mut impl Rng) -> EnvState {
    let mut traffic = Vec::new();
    let count = p.vehicles_per_lane[ctx.density as usize];
    let span = p.window_ahead + p.window_behind;
    for lane in 1..=p.highway_lanes {
        if count == 0 {
            continue;
        }
        let seg = span / count as f64;
        for k in 0..count {
            let jitter = rng.random_range(0.0..(seg - p.spawn_spacing).max(1e-3));
            let x = -p.window_behind + k as f64 * seg + jitter;
            traffic.push(new_vehicle(p, ctx, x, lane, 0.85, rng));
        }
    }
    EnvState {
        time_step: 0,
        ego: Ego { x: 0.0, lane: 0, speed: p.ego_start_speed, merged: false },
        traffic,
        true_context: ctx,
        episode_length: p.episode_length,
    }
}

fn new_vehicle(p: &EnvParams, ctx: Context, x: f64, lane: u8, min_speed_frac: f64, rng: &mut impl Rng) -> Vehicle {
    let offset = rng.random_range(-0.3..0.3);
    let aggressiveness = (ctx.behavior as f64 + offset).clamp(0.0, 2.0);
    let v0 = lerp_level(&p.idm.desired_speed, aggressiveness);
    Vehicle {
        x,
        lane,
        speed: v0 * rng.random_range(min_speed_frac..=1.0),
        aggressiveness,
        offset,
        brake_timer: 0,
    }
}

/// Random braking and lane-change events for drivers near the ego.
fn apply_hazards(p: &EnvParams, s: &mut EnvState, rng: &mut impl Rng) {
    let hz = &p.hazards;
    let ego_x = s.ego.x;
    for i in 0..s.traffic.len() {
        if (s.traffic[i].x - ego_x).abs() > hz.interaction_range {
            continue;
        }
        let aggr = s.traffic[i].aggressiveness;
        if s.traffic[i].brake_timer == 0 && rng.random_bool(lerp_level(&hz.brake_prob, aggr).clamp(0.0, 1.0)) {
            s.traffic[i].brake_timer = hz.brake_steps;
        }
        if rng.random_bool(lerp_level(&hz.lane_change_prob, aggr).clamp(0.0, 1.0)) {
            let lane = s.traffic[i].lane;
            let up = rng.random_bool(0.5);
            let target = if up { lane + 1 } else { lane.saturating_sub(1) };
            if target == 0 || target > p.highway_lanes || target == lane {
                continue;
            }
            let accept = lerp_level(&hz.lane_change_accept_gap, aggr);
            let x = s.traffic[i].x;
            let mut clear = s
                .traffic
                .iter()
                .enumerate()
                .all(|(j, o)| j == i || o.lane != target || (o.x - x).abs() - p.vehicle_length >= accept);
            if s.ego.lane == target && (s.ego.x - x).abs() - p.vehicle_length < accept {
                clear = false;
            }
            if clear && !lane_change_is_safe(p, s, i, target) {
                clear = false;
            }
            if clear {
                s.traffic[i].lane = target;
            }
        }
    }
}

/// Neither the changer nor its new follower in traffic would have to brake
/// harder than the safe limit after driver `i` moves into `target`.
fn lane_change_is_safe(p: &EnvParams, s: &EnvState, i: usize, target: u8) -> bool {
    let me = &s.traffic[i];
    let mut leader: Option<(f64, f64)> = None;
    let mut follower: Option<&Vehicle> = None;
    for (j, o) in s.traffic.iter().enumerate() {
        if j == i || o.lane != target {
            continue;
        }
        if o.x > me.x {
            if leader.is_none_or(|(lx, _)| o.x < lx) {
                leader = Some((o.x, o.speed));
            }
        } else if follower.is_none_or(|f| o.x > f.x) {
            follower = Some(o);
        }
    }
    if s.ego.lane == target && s.ego.x > me.x && leader.is_none_or(|(lx, _)| s.ego.x < lx) {
        leader = Some((s.ego.x, s.ego.speed));
    }
    let limit = -p.hazards.lane_change_safe_decel;
    if idm_accel(p, me.x, me.speed, me.aggressiveness, leader) < limit {
        return false;
    }
    follower.is_none_or(|f| {
        let ego_between = s.ego.lane == target && s.ego.x > f.x && s.ego.x < me.x;
        ego_between || idm_accel(p, f.x, f.speed, f.aggressiveness, Some((me.x, me.speed))) >= limit
    })
}

/// Keeps the per-lane vehicle count near the density target.
fn maintain_density(p: &EnvParams, s: &mut EnvState, rng: &mut impl Rng) {
    let ego_x = s.ego.x;
    s.traffic.retain(|v| v.x >= ego_x - p.window_behind && v.x <= ego_x + p.window_ahead);
    let target = p.vehicles_per_lane[s.true_context.density as usize];
    for lane in 1..=p.highway_lanes {
        let in_lane: Vec<usize> = (0..s.traffic.len()).filter(|&i| s.traffic[i].lane == lane).collect();
        if in_lane.len() > target {
            // drop the farthest driver that is well away from the ego
            if let Some(&far) = in_lane
                .iter()
                .filter(|&&i| (s.traffic[i].x - ego_x).abs() > 60.0)
                .max_by(|&&a, &&b| (s.traffic[a].x - ego_x).abs().total_cmp(&(s.traffic[b].x - ego_x).abs()))
            {
                s.traffic.remove(far);
            }
        } else if in_lane.len() < target {
            let mean_speed = if in_lane.is_empty() {
                lerp_level(&p.idm.desired_speed, s.true_context.behavior as f64)
            } else {
                in_lane.iter().map(|&i| s.traffic[i].speed).sum::<f64>() / in_lane.len() as f64
            };
            let ahead = s.ego.speed >= mean_speed;
            let x = if ahead {
                ego_x + p.window_ahead - rng.random_range(0.0..20.0)
            } else {
                ego_x - p.window_behind + rng.random_range(0.0..20.0)
            };
            let spaced = in_lane.iter().all(|&i| (s.traffic[i].x - x).abs() >= p.spawn_spacing);
            if spaced {
                let v = new_vehicle(p, s.true_context, x, lane, 0.9, rng);
                s.traffic.push(v);
            }
        }
    }
}

/// One stochastic simulator step.
pub fn step_state(
    p: &EnvParams,
    state: &EnvState,
    schedule: &ContextSchedule,
    action: Action,
    rng: &mut impl Rng,
) -> StepOutcome {
    let mut s = state.clone();
    let was_on_ramp = s.ego.lane == 0;
    let lane_changed = apply_ego_action(p, &mut s, action);
    apply_hazards(p, &mut s, rng);
    advance(p, &mut s, None);

    s.time_step += 1;
    let ctx = schedule.at(s.time_step);
    if ctx != s.true_context {
        s.true_context = ctx;
        for v in &mut s.traffic {
            v.aggressiveness = (ctx.behavior as f64 + v.offset).clamp(0.0, 2.0);
        }
    }
    maintain_density(p, &mut s, rng);

    let merged_now = was_on_ramp && s.ego.lane >= 1 && !s.ego.merged;
    if merged_now {
        s.ego.merged = true;
    }
    let sur = surroundings(p, &s);
    let cost = step_cost(p, &sur);
    let hard_violation = sur.collision || sur.ttc < p.ttc_hard;
    let reward = p.reward_speed * (s.ego.speed / p.v_max) + if merged_now { p.merge_bonus } else { 0.0 }
        - if lane_changed { p.reward_lane_change } else { 0.0 };
    let merge_failed = s.ego.lane == 0 && s.ego.x > p.merge_zone_end;
    let terminated = sur.collision || merge_failed || s.time_step >= s.episode_length;
    StepOutcome {
        next_state: s,
        reward,
        cost,
        hard_violation,
        collision: sur.collision,
        clearance_increment: sur.front_gap.min(p.clearance_cap),
        front_gap: sur.front_gap,
        ttc: sur.ttc,
        merged_now,
        terminated,
    }
}

/// Deterministic one-step lookahead: the action is applied to a copy of the
/// state and traffic is propagated with the assumed behavior level and no
/// random events.
pub fn predict_margins(p: &EnvParams, state: &EnvState, action: Action, assumed: Context) -> PredictedMargins {
    let mut s = state.clone();
    apply_ego_action(p, &mut s, action);
    advance(p, &mut s, Some(assumed.behavior));
    let sur = surroundings(p, &s);
    let in_zone = s.ego.lane == 1 && s.ego.x >= p.merge_zone_start && s.ego.x <= p.merge_zone_end;
    PredictedMargins {
        front_gap: sur.front_gap,
        ttc: sur.ttc,
        merge_gap: sur.merge_gap,
        closing_speed: sur.closing,
        in_merge_zone: in_zone,
        expected_cost: step_cost(p, &sur),
    }
}

fn gauss(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

/// Sensor reading of the ego's surroundings with level-dependent noise.
pub fn observe(p: &EnvParams, state: &EnvState, rng: &mut impl Rng) -> Observation {
    let level = state.true_context.noise as usize;
    let (sg, sv) = (p.noise.gap_sigma[level], p.noise.speed_sigma[level]);
    let ego = &state.ego;
    let lane_reading = |lane: Option<u8>, rng: &mut ChaCha8Rng| -> (f64, f64) {
        match lane.and_then(|l| lead_in_lane(p, &state.traffic, l, ego.x)) {
            Some((gap, ls)) => ((gap + gauss(rng, sg)).max(0.0), ego.speed - ls + gauss(rng, sv)),
            None => (p.gap_sentinel, 0.0),
        }
    };
    // a dedicated stream keeps the draw order independent of `R`
    let mut local = stream(rng.random(), 0x0b5e);
    let (front_gap, front_closing) = lane_reading(Some(ego.lane), &mut local);
    let left = if ego.lane == 0 { None } else if ego.lane < p.highway_lanes { Some(ego.lane + 1) } else { None };
    let right = if ego.lane >= 2 { Some(ego.lane - 1) } else { None };
    let (left_gap, left_closing) = lane_reading(left, &mut local);
    let (right_gap, right_closing) = lane_reading(right, &mut local);
    let merge_lane = if ego.lane == 0 { 1 } else { ego.lane };
    let true_merge = min_abs_gap(p, &state.traffic, merge_lane, ego.x);
    let merge_gap = if true_merge >= p.gap_sentinel { true_merge } else { (true_merge + gauss(&mut local, sg)).max(0.0) };
    Observation {
        speed: (ego.speed + gauss(&mut local, sv)).clamp(0.0, p.v_max),
        lane: ego.lane,
        in_merge_zone: state.merging_zone_active(p),
        front_gap,
        front_closing,
        ttc: ttc_of(front_gap, front_closing, p.ttc_cap),
        left_gap,
        left_closing,
        right_gap,
        right_closing,
        merge_gap,
        context_estimate: None,
    }
}

/// The world as the safety layer's sensors report it: traffic positions and
/// speeds carry level-dependent noise, the ego's own state is exact.
pub fn perceive(p: &EnvParams, state: &EnvState, rng: &mut impl Rng) -> EnvState {
    let level = state.true_context.noise as usize;
    let (sg, sv) = (p.noise.gap_sigma[level], p.noise.speed_sigma[level]);
    let mut s = state.clone();
    if sg > 0.0 || sv > 0.0 {
        for v in &mut s.traffic {
            v.x += gauss(rng, sg);
            v.speed = (v.speed + gauss(rng, sv)).clamp(0.0, p.v_max);
        }
    }
    s
}
