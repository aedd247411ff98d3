//! Experiment harness: dataset generation, training, evaluation, sweeps and
//! query-position diagnostics on top of `groupdetr`.

pub mod commands;
pub mod config;
pub mod data;
pub mod diagnose;
pub mod evaluate;
pub mod sweep;
pub mod train;
