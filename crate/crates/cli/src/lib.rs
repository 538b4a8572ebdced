//! Experiment harness around the `propmix` library: declarative TOML
//! configs, seeded reproducible runs, threshold sweeps and ablation grids,
//! all emitting plot-ready CSV and JSON artifacts.

pub mod config;
pub mod metrics;
pub mod runner;
pub mod sweep;
