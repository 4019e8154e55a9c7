//! TOML configuration. Every section is optional and falls back to the
//! defaults below, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentParams;
use crate::constraints::{AsParams, PhiParams, TableSpec, ThresholdTable};
use crate::context::DiscrepancyWeights;
use crate::env::{Action, EnvParams};
use crate::shield::DEFAULT_FALLBACK_ORDER;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: EnvParams,
    pub context: ContextParams,
    pub cb: CbParams,
    pub phi: PhiParams,
    #[serde(rename = "as")]
    pub as_: AsParams,
    pub agent: AgentParams,
    pub shield: ShieldParams,
    pub harness: HarnessParams,
}

/// `context.*` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextParams {
    pub horizon: usize,
    pub self_prior: f64,
    pub default_cap: f64,
    pub recovery_window: usize,
    pub epsilon: f64,
    pub history_capacity: usize,
    pub weights: DiscrepancyWeights,
}

impl Default for ContextParams {
    fn default() -> Self {
        Self {
            horizon: 5,
            self_prior: 5.0,
            default_cap: 0.25,
            recovery_window: 20,
            epsilon: 1e-6,
            history_capacity: 50,
            weights: DiscrepancyWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbParams {
    pub table: TableSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShieldParams {
    pub fallback_order: Vec<Action>,
}

impl Default for ShieldParams {
    fn default() -> Self {
        Self { fallback_order: DEFAULT_FALLBACK_ORDER.to_vec() }
    }
}

/// `harness.*` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessParams {
    /// Per-episode safety budget `d`.
    pub budget: f64,
    pub seed_base: u64,
    pub seeds: usize,
    pub runs_per_seed: usize,
}

impl Default for HarnessParams {
    fn default() -> Self {
        Self { budget: 5.0, seed_base: 0, seeds: 10, runs_per_seed: 3 }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Format { path: path.to_path_buf(), message: msg },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn threshold_table(&self) -> Result<ThresholdTable, Error> {
        ThresholdTable::generate(&self.cb.table)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.env.validate()?;
        let c = &self.context;
        if c.horizon == 0 || c.recovery_window == 0 || c.history_capacity == 0 {
            return Err(Error::Config("context: horizon, recovery_window and history_capacity must be positive".into()));
        }
        if !(c.self_prior >= 0.0) || !(c.default_cap > 0.0) || !(c.epsilon > 0.0) {
            return Err(Error::Config("context: self_prior >= 0, default_cap > 0 and epsilon > 0 required".into()));
        }
        if !(self.phi.alpha >= 0.0 && self.phi.beta >= 0.0 && self.phi.epsilon > 0.0) {
            return Err(Error::Config("phi: alpha, beta >= 0 and epsilon > 0 required".into()));
        }
        if !(self.as_.gamma >= 0.0 && self.as_.rho_clip >= 0.0) {
            return Err(Error::Config("as: gamma and rho_clip must be non-negative".into()));
        }
        let a = &self.agent;
        if !(a.lr > 0.0 && a.lr <= 1.0) || !(0.0..=1.0).contains(&a.gamma) || !(a.lambda >= 0.0) || !a.q_init.is_finite() {
            return Err(Error::Config("agent: lr in (0,1], gamma in [0,1], lambda >= 0 and finite q_init required".into()));
        }
        for e in [a.eps_start, a.eps_end, a.eps_eval] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config("agent: exploration rates must lie in [0,1]".into()));
            }
        }
        let mut order = self.shield.fallback_order.clone();
        order.sort();
        order.dedup();
        if order.len() != Action::ALL.len() || self.shield.fallback_order.len() != Action::ALL.len() {
            return Err(Error::Config("shield.fallback_order must list every action exactly once".into()));
        }
        if !(self.harness.budget >= 0.0) {
            return Err(Error::Config("harness.budget must be non-negative".into()));
        }
        self.threshold_table()?;
        Ok(())
    }
}
