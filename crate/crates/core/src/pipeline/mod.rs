//! End-to-end experiment workflow on synthetic data.

pub mod baselines;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod report;
pub mod train;

pub use experiment::run_experiment;
pub use model::Model;
pub use report::ExperimentReport;
