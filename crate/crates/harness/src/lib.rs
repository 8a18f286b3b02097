//! Experiment runner for anchor refinement: training, evaluation, the K sweep
//! and method comparison, with JSON/CSV/SVG outputs.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod report;

pub use config::{ExperimentConfig, Method, Overrides};
pub use error::{HarnessError, Result};
pub use eval::{run_eval, sweep_k, train_model};
pub use report::{compare_methods, emit_outputs, RunReport};
