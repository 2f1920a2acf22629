//! Monte Carlo harness for the ddk estimators: seeded data generation,
//! method comparison on shared realizations, and summary output.

pub mod config;
pub mod error;
pub mod experiment;
pub mod summary;

pub use config::{ExperimentConfig, Method};
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, TrialRecord};
pub use summary::{summarize, SummaryRow};
