use serde::{Deserialize, Serialize};

use super::record::StepLog;

/// Per-run evaluation metrics, always derived from the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub violation_count: usize,
    pub total_reward: f64,
    pub cumulative_cost: f64,
    pub clearance: f64,
    pub intervention_rate: f64,
    pub infeasible_steps: usize,
    pub budget_overrun: bool,
    pub steps: usize,
}

impl RunMetrics {
    pub fn from_steps(steps: &[StepLog]) -> Self {
        let n = steps.len();
        let interventions = steps.iter().filter(|s| s.intervened).count();
        Self {
            violation_count: steps.iter().filter(|s| s.violation).count(),
            total_reward: steps.iter().map(|s| s.reward).sum(),
            cumulative_cost: steps.iter().map(|s| s.cost).sum(),
            clearance: steps.iter().map(|s| s.clearance).sum(),
            intervention_rate: if n == 0 { 0.0 } else { interventions as f64 / n as f64 },
            infeasible_steps: steps.iter().filter(|s| s.infeasible).count(),
            budget_overrun: steps.last().is_some_and(|s| s.budget_after < 0.0),
            steps: n,
        }
    }

    /// `(name, value)` pairs in CSV order.
    pub fn values(&self) -> [(&'static str, f64); 8] {
        [
            ("violations", self.violation_count as f64),
            ("reward", self.total_reward),
            ("cost", self.cumulative_cost),
            ("clearance", self.clearance),
            ("intervention_rate", self.intervention_rate),
            ("infeasible_steps", self.infeasible_steps as f64),
            ("budget_overrun", if self.budget_overrun { 1.0 } else { 0.0 }),
            ("steps", self.steps as f64),
        ]
    }
}

/// Sample mean and `(n - 1)`-denominator standard deviation. The standard
/// deviation of fewer than two values is reported as zero.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregated metrics for one (experiment, method, condition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub method: String,
    pub condition: String,
    pub stats: Vec<MetricStat>,
}

impl AggregateRow {
    pub fn from_runs(experiment: &str, method: &str, condition: &str, runs: &[&RunMetrics]) -> Self {
        let names = RunMetrics::from_steps(&[]).values().map(|(n, _)| n);
        let stats = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let xs: Vec<f64> = runs.iter().map(|r| r.values()[i].1).collect();
                let (mean, std) = mean_std(&xs);
                MetricStat { metric: (*name).to_string(), mean, std, n: xs.len() }
            })
            .collect();
        Self { experiment: experiment.into(), method: method.into(), condition: condition.into(), stats }
    }

    pub fn stat(&self, metric: &str) -> Option<&MetricStat> {
        self.stats.iter().find(|s| s.metric == metric)
    }

    pub fn n_runs(&self) -> usize {
        self.stats.first().map_or(0, |s| s.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn empty_log_metrics() {
        let m = RunMetrics::from_steps(&[]);
        assert_eq!(m.violation_count, 0);
        assert_eq!(m.intervention_rate, 0.0);
        assert!(!m.budget_overrun);
    }
}
