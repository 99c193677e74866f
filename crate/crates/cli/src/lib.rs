//! Experiment runner: JSON configs in, CSV/JSON metrics and SVG plots out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod output;
pub mod plot;
pub mod sweep;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, run_experiment_with, RunError, RunReport};
pub use plot::{emit_plot, Metric};
pub use sweep::{run_sweep, SweepIndex};
