//! Experiment harness for compositional Koopman models: dataset generation,
//! simulation and control evaluation, sweeps and reproducible reports.

pub mod cli;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod observer;
pub mod report;

pub use experiment::{ExperimentSpec, ModelKind};
