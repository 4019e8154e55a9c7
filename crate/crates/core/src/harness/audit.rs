//! Replays the safety invariants over produced run logs.

use std::fmt;

use crate::env::{is_held_out, Condition};

use super::record::EpisodeRecord;

pub const BUDGET_TOLERANCE: f64 = 1e-9;
const COST_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    /// Non-infeasible shielded steps execute an action with `h <= 0`.
    Admissibility,
    /// `B_t == d - sum of earlier costs` at every step.
    BudgetConsistency,
    /// `g_sh <= 0` implies the expected cost is within `tau`.
    LocalCostBound,
    /// Seen-condition logs never contain a held-out transition.
    SeenSeparation,
    /// Header step count matches the log.
    Shape,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Check::Admissibility => "per-step admissibility",
            Check::BudgetConsistency => "budget consistency",
            Check::LocalCostBound => "local cost bound",
            Check::SeenSeparation => "seen/unseen separation",
            Check::Shape => "log shape",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub check: Check,
    pub run: String,
    pub t: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t {
            Some(t) => write!(f, "[{}] {} t={}: {}", self.check, self.run, t, self.detail),
            None => write!(f, "[{}] {}: {}", self.check, self.run, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub runs: usize,
    pub steps: usize,
    pub shielded_steps: usize,
    pub checked_admissible: usize,
    pub infeasible_steps: usize,
    pub findings: Vec<Finding>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, check: Check) -> usize {
        self.findings.iter().filter(|f| f.check == check).count()
    }
}

fn run_label(r: &EpisodeRecord) -> String {
    let h = &r.header;
    format!("{}/{}/{}/seed{}/run{}", h.experiment, h.method.name, h.condition, h.seed, h.run)
}

pub fn audit_record(r: &EpisodeRecord, report: &mut AuditReport) {
    let label = run_label(r);
    let h = &r.header;
    report.runs += 1;
    report.steps += r.steps.len();
    let mut push = |check, t, detail: String| report.findings.push(Finding { check, run: label.clone(), t, detail });

    if h.steps != r.steps.len() {
        push(Check::Shape, None, format!("header says {} steps, log has {}", h.steps, r.steps.len()));
    }

    let mut spent = 0.0;
    for s in &r.steps {
        let expected_b = h.budget - spent;
        if (s.budget_remaining - expected_b).abs() > BUDGET_TOLERANCE {
            push(Check::BudgetConsistency, Some(s.t), format!("B_t {} != d - sum c {}", s.budget_remaining, expected_b));
        }
        spent += s.cost;
        if (s.budget_after - (h.budget - spent)).abs() > BUDGET_TOLERANCE {
            push(Check::BudgetConsistency, Some(s.t), format!("B_t+1 {} != {}", s.budget_after, h.budget - spent));
        }

        if h.method.shield_enabled {
            let (Some(hx), Some(gc), Some(ga), Some(gs), Some(tau), Some(ec)) =
                (s.h_executed, s.g_cb, s.g_as, s.g_sh, s.tau, s.expected_cost)
            else {
                push(Check::Shape, Some(s.t), "shielded step without constraint fields".into());
                continue;
            };
            if (hx - gc.max(ga).max(gs)).abs() > 0.0 {
                push(Check::Admissibility, Some(s.t), format!("h {hx} is not the max of ({gc}, {ga}, {gs})"));
            }
            if s.infeasible {
                report.infeasible_steps += 1;
            } else {
                report.checked_admissible += 1;
                if hx > 0.0 || gc > 0.0 || ga > 0.0 || gs > 0.0 {
                    push(Check::Admissibility, Some(s.t), format!("executed {} with h = {hx}", s.executed));
                }
            }
            // without SH the logged value is the inactive placeholder, not a bound
            if h.method.constraint_set.sh && gs <= 0.0 && ec > tau + COST_TOLERANCE {
                push(Check::LocalCostBound, Some(s.t), format!("expected cost {ec} > tau {tau}"));
            }
        } else if s.intervened || s.infeasible {
            push(Check::Shape, Some(s.t), "unshielded run reports an intervention".into());
        }
    }
    if h.method.shield_enabled {
        report.shielded_steps += r.steps.len();
    }

    if h.condition == Condition::Seen {
        for w in r.steps.windows(2) {
            let (a, b) = (w[0].true_context, w[1].true_context);
            if a != b && is_held_out(a, b) {
                push(Check::SeenSeparation, Some(w[1].t), format!("held-out transition {a} -> {b}"));
            }
        }
    }
}

pub fn audit(records: &[EpisodeRecord]) -> AuditReport {
    let mut report = AuditReport::default();
    for r in records {
        audit_record(r, &mut report);
    }
    report
}
