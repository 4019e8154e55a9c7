//! Runtime enforcement: admissible-set filtering with a deterministic
//! conservative fallback, plus budget charging.

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintEval, SafetyBudget};
use crate::env::{Action, NUM_ACTIONS};
use crate::Error;

/// Most conservative action first.
pub const DEFAULT_FALLBACK_ORDER: [Action; NUM_ACTIONS] =
    [Action::Slower, Action::Idle, Action::LaneLeft, Action::LaneRight, Action::Faster];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldDecision {
    pub proposed: Action,
    pub executed: Action,
    pub intervened: bool,
    /// No action was admissible; the head of the fallback order was used.
    pub infeasible: bool,
    /// Indexed by action id.
    pub evals: Vec<ConstraintEval>,
}

impl ShieldDecision {
    pub fn executed_eval(&self) -> &ConstraintEval {
        &self.evals[self.executed.id()]
    }

    pub fn admissible_count(&self) -> usize {
        self.evals.iter().filter(|e| e.admissible).count()
    }
}

/// Keeps the proposal if admissible, else takes the first admissible
/// action of `fallback_order`, else the head of `fallback_order`.
pub fn filter(proposed: Action, evals: &[Option<ConstraintEval>], fallback_order: &[Action]) -> Result<ShieldDecision, Error> {
    if evals.len() != NUM_ACTIONS {
        return Err(Error::Config(format!("shield needs {NUM_ACTIONS} evaluations, got {}", evals.len())));
    }
    let evals: Vec<ConstraintEval> = evals
        .iter()
        .enumerate()
        .map(|(id, e)| e.ok_or_else(|| Error::Config(format!("missing evaluation for action {}", Action::ALL[id]))))
        .collect::<Result<_, _>>()?;
    if fallback_order.is_empty() {
        return Err(Error::Config("empty fallback order".into()));
    }

    let (executed, infeasible) = if evals[proposed.id()].admissible {
        (proposed, false)
    } else {
        match fallback_order.iter().find(|a| evals[a.id()].admissible) {
            Some(&a) => (a, false),
            None => (fallback_order[0], true),
        }
    };
    Ok(ShieldDecision { proposed, executed, intervened: executed != proposed, infeasible, evals })
}

/// `B_{t+1} = B_t - c_t`; the remainder may go negative.
pub fn charge_budget(budget: &SafetyBudget, realized_cost: f64) -> SafetyBudget {
    debug_assert!(realized_cost >= 0.0);
    let spent = budget.spent + realized_cost;
    SafetyBudget { total: budget.total, spent, remaining: budget.total - spent }
}
