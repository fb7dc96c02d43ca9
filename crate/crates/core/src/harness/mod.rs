//! In-process cohort driver, experiments and reporting.

pub mod criteria;
pub mod experiments;
pub mod report;
pub mod sim;

pub use report::{RunReport, Verdict};
pub use sim::{run_experiment, simulation_ca, RunOptions, Simulation};
