//! The three adaptive constraint families (CB, AS, SH), the
//! budget-to-threshold allocator and the combined hard constraint.
//!
//! Every constraint follows the sign convention `g <= 0` means satisfied.
//! A constraint that is switched off reports [`INACTIVE`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{Context, ContextForecast, NUM_CONTEXTS};
use crate::env::{predict_margins, Action, EnvParams, EnvState};
use crate::Error;

/// Value reported by a constraint that does not apply.
pub const INACTIVE: f64 = -1.0;

/// Driving thresholds for one context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub min_front_gap: f64,
    pub min_ttc: f64,
    pub min_merge_gap: f64,
    pub max_closing_speed: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { min_front_gap: 8.0, min_ttc: 1.5, min_merge_gap: 10.0, max_closing_speed: 10.0 }
    }
}

impl Thresholds {
    /// Field-wise most conservative combination.
    pub fn most_conservative(self, other: Thresholds) -> Thresholds {
        Thresholds {
            min_front_gap: self.min_front_gap.max(other.min_front_gap),
            min_ttc: self.min_ttc.max(other.min_ttc),
            min_merge_gap: self.min_merge_gap.max(other.min_merge_gap),
            max_closing_speed: self.max_closing_speed.min(other.max_closing_speed),
        }
    }

    /// Whether `self` is at least as conservative as `other` in every field.
    pub fn dominates(&self, other: &Thresholds) -> bool {
        self.min_front_gap >= other.min_front_gap
            && self.min_ttc >= other.min_ttc
            && self.min_merge_gap >= other.min_merge_gap
            && self.max_closing_speed <= other.max_closing_speed
    }

    /// Inflates the minimum fields and deflates the closing-speed limit.
    pub fn scaled(self, factor: f64) -> Thresholds {
        Thresholds {
            min_front_gap: self.min_front_gap * factor,
            min_ttc: self.min_ttc * factor,
            min_merge_gap: self.min_merge_gap * factor,
            max_closing_speed: self.max_closing_speed / factor,
        }
    }
}

/// `cb.table.*` keys: the level-(0,0,0) record and the per-level scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSpec {
    pub base: Thresholds,
    pub scale: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self { base: Thresholds::default(), scale: 0.25 }
    }
}

/// Context → thresholds, monotone in every context axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    entries: Vec<Thresholds>,
}

impl ThresholdTable {
    /// Entry for a context with level sum `L` is `base` scaled by
    /// `1 + scale * L / 6`.
    pub fn generate(spec: &TableSpec) -> Result<Self, Error> {
        let b = &spec.base;
        if !(b.min_front_gap > 0.0 && b.min_ttc > 0.0 && b.min_merge_gap > 0.0 && b.max_closing_speed > 0.0) {
            return Err(Error::Config("cb.table.base thresholds must be positive".into()));
        }
        if !(spec.scale >= 0.0 && spec.scale.is_finite()) {
            return Err(Error::Config("cb.table.scale must be a finite non-negative number".into()));
        }
        let entries = Context::all()
            .map(|c| spec.base.scaled(1.0 + spec.scale * c.level_sum() as f64 / 6.0))
            .collect();
        Ok(Self { entries })
    }

    pub fn from_entries(entries: Vec<Thresholds>) -> Result<Self, Error> {
        if entries.len() != NUM_CONTEXTS {
            return Err(Error::Config(format!("threshold table needs {NUM_CONTEXTS} entries, got {}", entries.len())));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, c: Context) -> Thresholds {
        self.entries[c.index()]
    }

    /// Raising any single axis never loosens any field.
    pub fn is_monotone(&self) -> bool {
        Context::all().all(|c| c.neighbors().iter().filter(|n| n.level_sum() > c.level_sum()).all(|n| self.get(*n).dominates(&self.get(c))))
    }
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self::generate(&TableSpec::default()).expect("default table spec is valid")
    }
}

/// One-step lookahead summary consumed by CB and SH.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMargins {
    pub front_gap: f64,
    pub ttc: f64,
    pub merge_gap: f64,
    pub closing_speed: f64,
    /// Ego occupies the merge lane inside the merge zone.
    pub in_merge_zone: bool,
    pub expected_cost: f64,
}

impl PredictedMargins {
    fn is_finite(&self) -> bool {
        [self.front_gap, self.ttc, self.merge_gap, self.closing_speed, self.expected_cost]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean of `(density + behavior + noise) / 6` over the forecast.
pub fn risk_level(sequence: &[Context]) -> f64 {
    assert!(!sequence.is_empty(), "risk of an empty forecast");
    sequence.iter().map(|c| c.level_sum() as f64 / 6.0).sum::<f64>() / sequence.len() as f64
}

pub fn effective_thresholds(table: &ThresholdTable, current: Context, forecast: &ContextForecast) -> Thresholds {
    forecast.sequence.iter().fold(table.get(current), |acc, c| acc.most_conservative(table.get(*c)))
}

/// Maximum normalized deficit over the four driving margins.
pub fn cb_constraint(m: &PredictedMargins, th: &Thresholds) -> f64 {
    let front = (th.min_front_gap - m.front_gap) / th.min_front_gap;
    let ttc = (th.min_ttc - m.ttc) / th.min_ttc;
    let merge = if m.in_merge_zone { (th.min_merge_gap - m.merge_gap) / th.min_merge_gap } else { INACTIVE };
    let closing = (m.closing_speed - th.max_closing_speed) / th.max_closing_speed.max(0.1);
    front.max(ttc).max(merge).max(closing)
}

/// `cb.*` and `as.*` tightening parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsParams {
    pub gamma: f64,
    pub rho_clip: f64,
}

impl Default for AsParams {
    fn default() -> Self {
        Self { gamma: 0.5, rho_clip: 4.0 }
    }
}

pub fn as_tightening_factor(rho: f64, p: &AsParams) -> f64 {
    1.0 + p.gamma * (rho - 1.0).max(0.0).min(p.rho_clip)
}

/// Active only when the adaptation ratio strictly exceeds one.
pub fn as_constraint(g_cb_tight: f64, rho: f64) -> f64 {
    if rho > 1.0 {
        g_cb_tight
    } else {
        INACTIVE
    }
}

/// `phi.*` allocator coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for PhiParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, epsilon: 1e-6 }
    }
}

/// Risk- and capacity-scaled share of the remaining budget:
/// `B / (N + eps) / (1 + alpha * R + beta * max(0, rho - 1))`.
pub fn allocate_threshold(remaining: f64, remaining_exposure: usize, risk: f64, rho: f64, p: &PhiParams) -> f64 {
    debug_assert!(remaining_exposure >= 1);
    if remaining <= 0.0 {
        return 0.0;
    }
    let share = remaining / (remaining_exposure as f64 + p.epsilon);
    share / (1.0 + p.alpha * risk + p.beta * (rho - 1.0).max(0.0))
}

pub fn sh_constraint(expected_cost: f64, tau: f64) -> f64 {
    expected_cost - tau
}

/// Cumulative safety budget; `remaining == total - spent` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyBudget {
    pub total: f64,
    pub spent: f64,
    pub remaining: f64,
}

impl SafetyBudget {
    pub fn new(total: f64) -> Self {
        assert!(total >= 0.0);
        Self { total, spent: 0.0, remaining: total }
    }

    pub fn overrun(&self) -> bool {
        self.remaining < 0.0
    }
}

/// Constraint values for one (state, action) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEval {
    pub g_cb: f64,
    pub g_as: f64,
    pub g_sh: f64,
    pub h: f64,
    pub tau: f64,
    pub admissible: bool,
    pub expected_cost: f64,
}

impl ConstraintEval {
    pub fn from_parts(g_cb: f64, g_as: f64, g_sh: f64, tau: f64, expected_cost: f64) -> Self {
        let h = g_cb.max(g_as).max(g_sh);
        Self { g_cb, g_as, g_sh, h, tau, admissible: h <= 0.0, expected_cost }
    }

    /// Placeholder for an action whose lookahead failed.
    pub fn failed(tau: f64) -> Self {
        Self::from_parts(1.0, 1.0, 1.0, tau, 0.0)
    }
}

/// Which constraint families are enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub cb: bool,
    pub as_: bool,
    pub sh: bool,
}

impl ConstraintSet {
    pub const NONE: ConstraintSet = ConstraintSet { cb: false, as_: false, sh: false };
    pub const FULL: ConstraintSet = ConstraintSet { cb: true, as_: true, sh: true };

    /// The seven non-empty subsets, singletons first.
    pub fn non_empty_subsets() -> [ConstraintSet; 7] {
        let s = |cb, as_, sh| ConstraintSet { cb, as_, sh };
        [
            s(true, false, false),
            s(false, true, false),
            s(false, false, true),
            s(true, true, false),
            s(true, false, true),
            s(false, true, true),
            s(true, true, true),
        ]
    }

    pub fn is_empty(&self) -> bool {
        !(self.cb || self.as_ || self.sh)
    }
}

impl fmt::Display for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.cb, "CB"), (self.as_, "AS"), (self.sh, "SH")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for ConstraintSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = ConstraintSet::NONE;
        if s.eq_ignore_ascii_case("none") {
            return Ok(set);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "CB" => set.cb = true,
                "AS" => set.as_ = true,
                "SH" => set.sh = true,
                other => return Err(Error::Parse(format!("unknown constraint `{other}`"))),
            }
        }
        Ok(set)
    }
}

/// Per-step inputs shared by every action's evaluation.
#[derive(Debug, Clone)]
pub struct StepInputs<'a> {
    pub current: Context,
    pub forecast: &'a ContextForecast,
    pub budget: &'a SafetyBudget,
    pub remaining_steps: usize,
    pub rho: f64,
}

/// Frozen stationary specification used by the fixed-constraint baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedSpec {
    pub thresholds: Thresholds,
    pub tau: f64,
}

/// Constraint construction for one method.
#[derive(Debug, Clone)]
pub struct SafetyLayer {
    pub table: ThresholdTable,
    pub phi: PhiParams,
    pub as_params: AsParams,
    pub set: ConstraintSet,
    pub fixed: Option<FixedSpec>,
}

impl SafetyLayer {
    pub fn adaptive(table: ThresholdTable, phi: PhiParams, as_params: AsParams, set: ConstraintSet) -> Self {
        Self { table, phi, as_params, set, fixed: None }
    }

    /// CB+SH frozen at the mid-level entry with `tau = d / T`.
    pub fn fixed(table: ThresholdTable, phi: PhiParams, as_params: AsParams, budget: f64, episode_length: usize) -> Self {
        let mid = Context::new(1, 1, 1).expect("valid");
        let fixed = FixedSpec { thresholds: table.get(mid), tau: budget / episode_length as f64 };
        Self {
            table,
            phi,
            as_params,
            set: ConstraintSet { cb: true, as_: false, sh: true },
            fixed: Some(fixed),
        }
    }

    pub fn tau(&self, inputs: &StepInputs<'_>) -> f64 {
        match &self.fixed {
            Some(f) => f.tau,
            None => allocate_threshold(
                inputs.budget.remaining,
                inputs.remaining_steps.max(1),
                inputs.forecast.risk,
                inputs.rho,
                &self.phi,
            ),
        }
    }

    pub fn thresholds(&self, inputs: &StepInputs<'_>) -> Thresholds {
        match &self.fixed {
            Some(f) => f.thresholds,
            None => effective_thresholds(&self.table, inputs.current, inputs.forecast),
        }
    }

    /// Constraint values given the lookahead margins of one action.
    pub fn evaluate_margins(&self, m: &PredictedMargins, inputs: &StepInputs<'_>, tau: f64) -> ConstraintEval {
        let th = self.thresholds(inputs);
        let g_cb = if self.set.cb { cb_constraint(m, &th) } else { INACTIVE };
        let g_as = if self.set.as_ && self.fixed.is_none() {
            let tight = th.scaled(as_tightening_factor(inputs.rho, &self.as_params));
            as_constraint(cb_constraint(m, &tight), inputs.rho)
        } else {
            INACTIVE
        };
        let g_sh = if self.set.sh { sh_constraint(m.expected_cost, tau) } else { INACTIVE };
        ConstraintEval::from_parts(g_cb, g_as, g_sh, tau, m.expected_cost)
    }

    /// Runs the environment lookahead for `action` under the detected
    /// context and evaluates all active constraints.
    pub fn evaluate(
        &self,
        params: &EnvParams,
        state: &EnvState,
        action: Action,
        inputs: &StepInputs<'_>,
    ) -> Result<ConstraintEval, Error> {
        let m = predict_margins(params, state, action, inputs.current);
        if !m.is_finite() {
            return Err(Error::Lookahead(format!("non-finite margins for {action}")));
        }
        Ok(self.evaluate_margins(&m, inputs, self.tau(inputs)))
    }
}
