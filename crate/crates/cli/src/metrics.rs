//! Metrics emission: the per-epoch CSV, the run summary JSON, and the
//! failure marker.
//!
//! Rows stream into `metrics.partial.csv` and the file is renamed to
//! `metrics.csv` only when the run completes, so a partial file is never
//! mistaken for a finished one. Floats use the shortest round-trip
//! encoding in both formats; absent diagnostics are empty CSV cells.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use propmix::train::EpochStats;
use propmix::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const PARTIAL_FILE: &str = "metrics.partial.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILURE_FILE: &str = "failure.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub test_acc: f64,
    pub est_noise_rate: f64,
    pub zeta: f64,
    pub n_clean: f64,
    pub n_easy: f64,
    pub n_hard: f64,
    pub clean_precision: Option<f64>,
    pub clean_recall: Option<f64>,
    pub hard_precision: Option<f64>,
    pub hard_recall: Option<f64>,
    pub relabel_acc: Option<f64>,
    pub train_loss: f64,
}

impl MetricsRow {
    pub fn from_stats(stats: &EpochStats, test_acc: f64) -> MetricsRow {
        MetricsRow {
            epoch: stats.epoch,
            test_acc,
            est_noise_rate: stats.est_noise_rate,
            zeta: stats.zeta(),
            n_clean: stats.n_clean,
            n_easy: stats.n_easy,
            n_hard: stats.n_hard,
            clean_precision: stats.clean_precision,
            clean_recall: stats.clean_recall,
            hard_precision: stats.hard_precision,
            hard_recall: stats.hard_recall,
            relabel_acc: stats.relabel_acc,
            train_loss: stats.train_loss,
        }
    }

    /// A row for stages that neither filter nor estimate noise; only the
    /// accuracy and (optionally) the loss carry information.
    pub fn plain(epoch: usize, test_acc: f64, n: usize, train_loss: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            test_acc,
            est_noise_rate: 0.0,
            zeta: 0.0,
            n_clean: n as f64,
            n_easy: 0.0,
            n_hard: 0.0,
            clean_precision: None,
            clean_recall: None,
            hard_precision: None,
            hard_recall: None,
            relabel_acc: None,
            train_loss,
        }
    }
}

/// Streams rows to the partial file; [`MetricsWriter::finish`] promotes it
/// to the final name. Dropping the writer without finishing leaves the
/// partial file in place.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
    dir: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<MetricsWriter> {
        std::fs::create_dir_all(dir)?;
        let writer = csv::Writer::from_writer(File::create(dir.join(PARTIAL_FILE))?);
        Ok(MetricsWriter {
            writer,
            dir: dir.to_path_buf(),
        })
    }

    /// Appends and flushes, so the partial file is complete up to the last
    /// finished epoch even if the process dies.
    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush()?;
        drop(self.writer);
        let final_path = self.dir.join(METRICS_FILE);
        std::fs::rename(self.dir.join(PARTIAL_FILE), &final_path)?;
        Ok(final_path)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("metrics csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub best_acc: f64,
    pub last10_acc: f64,
    pub epochs: usize,
    pub seed: u64,
    pub wall_clock_s: f64,
}

/// Best is the max over rows; "last10" averages the final 10 epochs when
/// at least 10 exist, otherwise it is the final epoch's accuracy.
pub fn accuracy_digest(rows: &[MetricsRow]) -> (f64, f64) {
    let best = rows.iter().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max);
    let tail = if rows.len() >= 10 {
        &rows[rows.len() - 10..]
    } else {
        &rows[rows.len().saturating_sub(1)..]
    };
    let last10 = tail.iter().map(|r| r.test_acc).sum::<f64>() / tail.len().max(1) as f64;
    (best, last10)
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<PathBuf> {
    let path = dir.join(SUMMARY_FILE);
    let file = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(file, summary)?;
    Ok(path)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let file = File::open(dir.join(SUMMARY_FILE))?;
    Ok(serde_json::from_reader(file)?)
}

/// Marks a failed run next to whatever partial output it left behind.
pub fn write_failure_marker(dir: &Path, config_hash: &str, seed: u64, error: &Error) -> Result<()> {
    let marker = serde_json::json!({
        "config_hash": config_hash,
        "seed": seed,
        "error": error.to_string(),
    });
    let file = BufWriter::new(File::create(dir.join(FAILURE_FILE))?);
    serde_json::to_writer_pretty(file, &marker)?;
    Ok(())
}
