//! Threshold sweeps and the variant-by-noise-rate ablation grid. Both run
//! each cell as a complete experiment in its own subdirectory, then
//! aggregate the summaries into one table at the output root.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use propmix::{Error, Result};

use crate::config::{RunConfig, Variant};
use crate::runner::run_experiment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_clean: f64,
    pub tau_hard: f64,
    pub seed: u64,
    pub best_acc: f64,
    pub last10_acc: f64,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// One full run per (τ, τ′, seed) grid point; rows land in grid order.
pub fn sweep_thresholds(cfg: &RunConfig) -> Result<(Vec<SweepRow>, PathBuf)> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep mode needs a [sweep] section"))?;
    let mut rows = Vec::with_capacity(grid.tau_clean.len() * grid.tau_hard.len());
    for &tau_clean in &grid.tau_clean {
        for &tau_hard in &grid.tau_hard {
            let mut cell = cfg.clone();
            cell.filter.tau_clean = tau_clean;
            cell.filter.tau_hard = tau_hard;
            cell.validate()?;
            for &seed in &cfg.run.seeds {
                let dir = cfg
                    .run
                    .out_dir
                    .join(format!("sweep/tau_{tau_clean}_tauh_{tau_hard}/seed_{seed}"));
                let report = run_experiment(&cell, seed, &dir)?;
                rows.push(SweepRow {
                    tau_clean,
                    tau_hard,
                    seed,
                    best_acc: report.best_acc,
                    last10_acc: report.last10_acc,
                });
            }
        }
    }
    let path = cfg.run.out_dir.join(SWEEP_FILE);
    write_serialized(&path, &rows)?;
    Ok((rows, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub noise_rate: f64,
    pub seed: u64,
    pub best_acc: f64,
    pub last10_acc: f64,
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation_table.csv";

/// Runs every (variant, noise rate, seed) cell with shared seeds, so the
/// only thing varying along each axis is the thing being ablated. Returns
/// the long-form cells; the wide per-rate table is also written.
pub fn run_ablation(cfg: &RunConfig) -> Result<(Vec<AblationCell>, PathBuf)> {
    let grid = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| Error::config("ablation mode needs an [ablation] section"))?;
    let mut cells = Vec::new();
    for &variant in &grid.variants {
        for &noise_rate in &grid.noise_rates {
            let mut cell_cfg = cfg.clone();
            cell_cfg.noise.rate = noise_rate;
            cell_cfg.run.variant = variant;
            cell_cfg.validate()?;
            for &seed in &cfg.run.seeds {
                let dir = cfg
                    .run
                    .out_dir
                    .join(format!("ablation/{variant}/rate_{noise_rate}/seed_{seed}"));
                let report = run_experiment(&cell_cfg, seed, &dir)?;
                cells.push(AblationCell {
                    variant,
                    noise_rate,
                    seed,
                    best_acc: report.best_acc,
                    last10_acc: report.last10_acc,
                });
            }
        }
    }
    write_serialized(&cfg.run.out_dir.join(ABLATION_FILE), &cells)?;
    let table = cfg.run.out_dir.join(ABLATION_TABLE_FILE);
    write_ablation_table(&table, grid.noise_rates.as_slice(), &grid.variants, &cells)?;
    Ok((cells, table))
}

/// Wide table: one row per variant, one best-accuracy column per noise
/// rate, averaged over seeds.
fn write_ablation_table(
    path: &Path,
    rates: &[f64],
    variants: &[Variant],
    cells: &[AblationCell],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let mut header = vec!["variant".to_string()];
    header.extend(rates.iter().map(|r| format!("acc_{r}")));
    w.write_record(&header).map_err(csv_err)?;
    for &variant in variants {
        let mut record = vec![variant.to_string()];
        for &rate in rates {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.variant == variant && c.noise_rate == rate)
                .map(|c| c.best_acc)
                .collect();
            let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
            record.push(format!("{mean}"));
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("table csv: {e}"))
}
