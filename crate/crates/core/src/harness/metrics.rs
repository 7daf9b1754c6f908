use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTableRow {
    pub task: usize,
    /// Accuracy on tasks `1..=task`.
    pub accuracy: Vec<f64>,
    pub average: f64,
    pub mu_sat: Option<f64>,
    pub switched: bool,
    pub seconds: Option<f64>,
}

/// One row per finished task over a stream of `tasks` tasks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub tasks: usize,
    pub rows: Vec<MetricsTableRow>,
}

impl MetricsTable {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::new(),
        }
    }

    pub fn final_average(&self) -> Option<f64> {
        self.rows.last().map(|r| r.average)
    }
}

pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_float)
}

/// `task,acc_1..acc_K,avg,mu_sat,switched,seconds`, six decimals, with
/// accuracy cells of unseen tasks left empty.
pub fn metrics_csv(table: &MetricsTable) -> String {
    let mut out = String::from("task");
    for t in 1..=table.tasks {
        let _ = write!(out, ",acc_{t}");
    }
    out.push_str(",avg,mu_sat,switched,seconds\n");
    for row in &table.rows {
        let _ = write!(out, "{}", row.task);
        for t in 0..table.tasks {
            out.push(',');
            if let Some(a) = row.accuracy.get(t) {
                out.push_str(&fmt_float(*a));
            }
        }
        let _ = writeln!(
            out,
            ",{},{},{},{}",
            fmt_float(row.average),
            fmt_opt(row.mu_sat),
            u8::from(row.switched),
            fmt_opt(row.seconds)
        );
    }
    out
}

/// Dense integer matrix, one line per true class.
pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes `metrics.csv` into `dir`.
pub fn emit_metrics(table: &MetricsTable, dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let file = dir.join("metrics.csv");
    fs::write(&file, metrics_csv(table)).map_err(|e| HarnessError::io(&file, e))
}
