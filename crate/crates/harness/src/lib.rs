//! Experiment harness: configuration documents, training/evaluation runners,
//! ablation grids, similarity matching, and the `sta` command-line tool.

pub mod config;
pub mod eval;
pub mod runner;

pub use config::ExperimentConfig;
pub use eval::{EvalReport, VsmReport};
