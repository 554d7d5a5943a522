//! Experiment orchestration behind the `gddpc-bench` binary.

pub mod commands;
pub mod plot;
