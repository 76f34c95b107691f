use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{io_err, Result};

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// Test accuracy (percent) of each task trained, after the last one.
    pub accuracies: Vec<f64>,
    /// Mean of `accuracies`.
    pub average: f64,
    /// Wall-clock seconds spent training, generator included, evaluation
    /// and data loading excluded.
    pub train_seconds: f64,
    pub task_seconds: Vec<f64>,
    pub loss_curves: Vec<Vec<f32>>,
    /// False when training stopped before the last task.
    pub complete: bool,
    pub error: Option<String>,
}

/// One line of the per-task report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub protocol: String,
    pub scenario: String,
    pub seed: u64,
    pub task_id: usize,
    pub accuracy: f64,
    pub avg_accuracy: f64,
    pub train_seconds: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

impl RunReport {
    pub fn new(config: RunConfig, accuracies: Vec<f64>, task_seconds: Vec<f64>, loss_curves: Vec<Vec<f32>>) -> Self {
        let complete = accuracies.len() == config.n_tasks;
        Self {
            average: mean(&accuracies),
            train_seconds: task_seconds.iter().sum(),
            config,
            accuracies,
            task_seconds,
            loss_curves,
            complete,
            error: None,
        }
    }

    /// Rows for the report CSV, one per task (1-based `task_id`).
    pub fn rows(&self) -> Vec<ReportRow> {
        self.accuracies
            .iter()
            .enumerate()
            .map(|(i, &accuracy)| ReportRow {
                method: self.config.method.to_string(),
                protocol: self.config.protocol.to_string(),
                scenario: self.config.scenario.to_string(),
                seed: self.config.seed,
                task_id: i + 1,
                accuracy,
                avg_accuracy: self.average,
                train_seconds: self.train_seconds,
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    /// Writes `<tag>.csv` and `<tag>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tag = self.config.tag();
        self.write_csv(&dir.join(format!("{tag}.csv")))?;
        self.write_json(&dir.join(format!("{tag}.json")))
    }

    /// Human-readable one-line summary.
    pub fn summary(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| format!("{a:.2}")).collect();
        format!(
            "{} {} {} seed {}: avg {:.2} [{}] in {:.1}s{}",
            self.config.protocol,
            self.config.scenario,
            self.config.method,
            self.config.seed,
            self.average,
            accs.join(" "),
            self.train_seconds,
            if self.complete { "" } else { " (incomplete)" }
        )
    }
}

pub fn write_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
