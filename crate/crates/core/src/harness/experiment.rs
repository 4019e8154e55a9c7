//! Main comparison (C8), backbone portability (C7) and constraint
//! ablation (C5).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::constraints::ConstraintSet;
use crate::env::Condition;
use crate::parallel;
use crate::rng::derive_seed;
use crate::Error;

use super::episode::{fresh_env, run_episode, Learner, Phase};
use super::method::{BackboneKind, MethodSpec};
use super::metrics::{AggregateRow, RunMetrics};
use super::record::{EpisodeRecord, RunHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    C8Main,
    C7Portability,
    C5Ablation,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::C8Main => "c8",
            Experiment::C7Portability => "c7",
            Experiment::C5Ablation => "c5",
        }
    }

    /// Methods compared by the experiment, in reporting order.
    pub fn methods(self, cfg: &Config) -> Vec<MethodSpec> {
        let lambda = cfg.agent.lambda;
        match self {
            Experiment::C8Main => vec![
                MethodSpec::unconstrained(BackboneKind::Tabular),
                MethodSpec::fixed(BackboneKind::Tabular, lambda),
                MethodSpec::adaptive(BackboneKind::Tabular, ConstraintSet::FULL, lambda).named("full"),
            ],
            Experiment::C7Portability => vec![
                MethodSpec::unconstrained(BackboneKind::Tabular).named("tabular_unshielded"),
                MethodSpec::adaptive(BackboneKind::Tabular, ConstraintSet::FULL, lambda).named("tabular_full"),
                MethodSpec::unconstrained(BackboneKind::Heuristic).named("heuristic_unshielded"),
                MethodSpec::adaptive(BackboneKind::Heuristic, ConstraintSet::FULL, lambda).named("heuristic_full"),
            ],
            Experiment::C5Ablation => ConstraintSet::non_empty_subsets()
                .into_iter()
                .map(|s| MethodSpec::adaptive(BackboneKind::Tabular, s, lambda))
                .collect(),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "c8" | "c8_main" => Ok(Experiment::C8Main),
            "c7" | "c7_portability" => Ok(Experiment::C7Portability),
            "c5" | "c5_ablation" => Ok(Experiment::C5Ablation),
            _ => Err(Error::Parse(format!("unknown experiment `{s}`"))),
        }
    }
}

/// One evaluation run and its log.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub record: EpisodeRecord,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<AggregateRow>,
    pub runs: Vec<RunResult>,
}

/// Pre-trains a learner for one (method, seed) pair on the seen condition.
/// Environment seeds are shared across methods.
pub fn pretrain(cfg: &Config, method: &MethodSpec, seed: u64) -> Result<Learner, Error> {
    let mut learner = Learner::new(cfg, method);
    if method.backbone == BackboneKind::Heuristic {
        return Ok(learner);
    }
    for ep in 0..cfg.agent.train_episodes {
        let env_seed = derive_seed(seed, 1_000_000 + ep as u64);
        let env = fresh_env(cfg, Condition::Seen, env_seed);
        run_episode(cfg, method, &mut learner, env, env_seed, Phase::Train { episode: ep })?;
    }
    Ok(learner)
}

/// Pre-trains once per seed, then evaluates `runs_per_seed` independent
/// episodes from clones of the trained learner.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &Config,
    experiment: Experiment,
    method: &MethodSpec,
    method_index: usize,
    condition: Condition,
    seed_index: usize,
    seed: u64,
    runs_per_seed: usize,
) -> Result<Vec<RunResult>, Error> {
    let trained = pretrain(cfg, method, seed)?;
    (0..runs_per_seed)
        .map(|run| {
            let mut learner = trained.clone();
            let env_seed = derive_seed(seed, run as u64);
            let env = fresh_env(cfg, condition, env_seed);
            let res = run_episode(cfg, method, &mut learner, env, env_seed, Phase::Eval)?;
            let metrics = res.metrics.clone();
            let header = RunHeader {
                experiment: experiment.name().into(),
                method: method.clone(),
                method_index,
                condition,
                seed,
                seed_index,
                run,
                budget: cfg.harness.budget,
                episode_length: cfg.env.episode_length,
                steps: 0,
            };
            Ok(RunResult { metrics, record: res.into_record(header) })
        })
        .collect()
}

pub fn seeds(cfg: &Config, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| cfg.harness.seed_base + i).collect()
}

/// Runs every (method, seed) cell and aggregates per method.
pub fn run_experiment(
    cfg: &Config,
    experiment: Experiment,
    condition: Condition,
    seeds: &[u64],
    runs_per_seed: usize,
) -> Result<ExperimentOutput, Error> {
    if seeds.len() < 2 {
        return Err(Error::Config("at least two seeds are required".into()));
    }
    if runs_per_seed == 0 {
        return Err(Error::Config("runs_per_seed must be positive".into()));
    }
    cfg.validate()?;
    let methods = experiment.methods(cfg);
    let cells: Vec<(usize, usize)> =
        (0..methods.len()).flat_map(|m| (0..seeds.len()).map(move |s| (m, s))).collect();
    let results = parallel::map(cells, |(m, s)| {
        run_cell(cfg, experiment, &methods[m], m, condition, s, seeds[s], runs_per_seed)
    });
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    Ok(ExperimentOutput { rows: aggregate(&runs), runs })
}

/// Groups runs by (experiment, method, condition) in order of appearance.
pub fn aggregate(runs: &[RunResult]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in runs {
        let h = &r.record.header;
        let k = (h.experiment.clone(), h.method.name.clone(), h.condition.name().to_string());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .map(|(e, m, c)| {
            let group: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| {
                    let h = &r.record.header;
                    &h.experiment == e && &h.method.name == m && h.condition.name() == c
                })
                .map(|r| &r.metrics)
                .collect();
            AggregateRow::from_runs(e, m, c, &group)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_counts() {
        let cfg = Config::default();
        assert_eq!(Experiment::C8Main.methods(&cfg).len(), 3);
        assert_eq!(Experiment::C5Ablation.methods(&cfg).len(), 7);
        assert_eq!(Experiment::C7Portability.methods(&cfg).len(), 4);
        for e in [Experiment::C8Main, Experiment::C7Portability, Experiment::C5Ablation] {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            for m in e.methods(&cfg) {
                m.validate().unwrap();
            }
        }
    }

    #[test]
    fn needs_two_seeds() {
        let cfg = Config::default();
        assert!(run_experiment(&cfg, Experiment::C8Main, Condition::Unseen, &[1], 1).is_err());
    }
}
