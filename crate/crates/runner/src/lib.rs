//! Experiment runner for kernel gradient descent with data-driven stopping:
//! configuration, parallel trial execution and CSV output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod output;

pub use config::{ExperimentConfig, ExperimentKind, RealDataConfig};
pub use error::RunnerError;
pub use experiment::{run_experiment, summarize, sweep_constant, ExperimentOutput, ResultRow, SummaryRow};
