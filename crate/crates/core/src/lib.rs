//! Predictive adaptive safety constraints for continual reinforcement
//! learning in a nonstationary highway-merge task.
//!
//! The per-step loop detects and forecasts the operating context, builds
//! context-based (CB), adaptation-speed (AS) and budget-driven (SH)
//! constraints, filters the policy's proposal through a runtime shield and
//! charges a cumulative safety budget. See [`harness::run_episode`].

// validation uses `!(x >= 0.0)` on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod config;
pub mod constraints;
pub mod context;
pub mod env;
pub mod harness;
pub mod parallel;
pub mod rng;
pub mod shield;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid action id {0}")]
    InvalidAction(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("lookahead failed: {0}")]
    Lookahead(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
