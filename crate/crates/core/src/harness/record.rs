use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::env::{Action, Condition};

use super::method::MethodSpec;

/// First line of every run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub experiment: String,
    pub method: MethodSpec,
    pub method_index: usize,
    pub condition: Condition,
    pub seed: u64,
    pub seed_index: usize,
    pub run: usize,
    pub budget: f64,
    pub episode_length: usize,
    pub steps: usize,
}

/// One logged step of the control loop. Shield fields are `None` for
/// methods that run without the safety layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub true_context: Context,
    pub detected_context: Context,
    pub risk: f64,
    pub rho: f64,
    pub v_cap: f64,
    pub proposed: Action,
    pub executed: Action,
    pub intervened: bool,
    pub infeasible: bool,
    pub admissible_count: Option<usize>,
    pub tau: Option<f64>,
    pub h_executed: Option<f64>,
    pub g_cb: Option<f64>,
    pub g_as: Option<f64>,
    pub g_sh: Option<f64>,
    pub expected_cost: Option<f64>,
    /// `B_t` before this step's cost is charged.
    pub budget_remaining: f64,
    pub cost: f64,
    pub budget_after: f64,
    pub reward: f64,
    pub violation: bool,
    pub collision: bool,
    pub clearance: f64,
    pub front_gap: f64,
    pub ttc: f64,
    pub ego_speed: f64,
    pub ego_lane: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: RunHeader,
    pub steps: Vec<StepLog>,
}
