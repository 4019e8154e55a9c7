//! Experiment orchestration, metrics, persistence and log audits.

pub mod audit;
pub mod episode;
pub mod experiment;
pub mod method;
pub mod metrics;
pub mod output;
pub mod record;

pub use audit::{audit, AuditReport, Check};
pub use episode::{run_episode, safety_layer, EpisodeResult, Learner, Phase};
pub use experiment::{aggregate, pretrain, run_experiment, seeds, Experiment, ExperimentOutput, RunResult};
pub use method::{BackboneKind, MethodSpec};
pub use metrics::{mean_std, AggregateRow, MetricStat, RunMetrics};
pub use output::{read_runs, read_summary, reaggregate, write_outputs, write_summary, write_summary_to};
pub use record::{EpisodeRecord, RunHeader, StepLog};
