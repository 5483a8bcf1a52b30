use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::TrainError;

pub const METRICS_HEADER: &str = "step,split,loss,lr,grad_norm,tokens_per_sec,elapsed_s";

/// Split label of a row that records a divergence.
pub const DIVERGED: &str = "diverged";

/// One line of `metrics.csv`. Fields that do not apply to a row are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: Option<f64>,
    pub tokens_per_sec: Option<f64>,
    pub elapsed_s: f64,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.split,
            self.loss,
            self.lr,
            opt(self.grad_norm),
            opt(self.tokens_per_sec),
            self.elapsed_s
        )
    }
}

/// Append-only metrics log, kept in memory and optionally mirrored to CSV.
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            rows: Vec::new(),
            file: None,
        }
    }

    /// Appends to `path`, writing the header first if the file is new or empty.
    pub fn to_file(path: &Path) -> Result<Self, TrainError> {
        let io = |e| TrainError::io(path, e);
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if f.metadata().map_err(io)?.len() == 0 {
            writeln!(f, "{METRICS_HEADER}").map_err(io)?;
        }
        Ok(MetricsLog {
            rows: Vec::new(),
            file: Some((path.to_path_buf(), f)),
        })
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<(), TrainError> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{}", row.to_csv())
                .and_then(|_| f.flush())
                .map_err(|e| TrainError::io(path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }
}
