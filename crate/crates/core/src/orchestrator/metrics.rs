//! Per-iteration metrics and their CSV form.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "iteration,mean_reward,mean_duration_s,valid_fraction,best_score_so_far,policy_entropy,clip_fraction,kl,wallclock_s";

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_duration_s: f64,
    pub valid_fraction: f64,
    /// Raw grader score, best under the task's direction; `None` until the
    /// first valid solution.
    pub best_score_so_far: Option<f64>,
    pub policy_entropy: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub wallclock_s: f64,
}

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_reward,
            self.mean_duration_s,
            self.valid_fraction,
            self.best_score_so_far
                .map(|b| b.to_string())
                .unwrap_or_default(),
            self.policy_entropy,
            self.clip_fraction,
            self.kl,
            self.wallclock_s
        );
        s
    }
}

/// Appends rows to `metrics.csv`, writing the header for a new file.
#[derive(Debug)]
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    /// Starts a fresh file, replacing any previous one.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let mut file = File::create(&path).map_err(|e| Error::path(&path, e))?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(Self { file })
    }

    /// Continues an existing file, or starts one.
    pub fn append(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        if !path.exists() {
            return Self::create(dir);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::path(&path, e))?;
        Ok(Self { file })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Parses a metrics file written by [`MetricsWriter`].
pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::Config(format!("bad metrics field {i} in {}", path.display()))
            })
        };
        out.push(IterationMetrics {
            iteration: num(0)? as usize,
            mean_reward: num(1)?,
            mean_duration_s: num(2)?,
            valid_fraction: num(3)?,
            best_score_so_far: row
                .get(4)
                .filter(|v| !v.is_empty())
                .and_then(|v| v.parse().ok()),
            policy_entropy: num(5)?,
            clip_fraction: num(6)?,
            kl: num(7)?,
            wallclock_s: num(8)?,
        });
    }
    Ok(out)
}
