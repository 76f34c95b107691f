use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ConfigFile, RunConfig};
use super::experiment::run_many;
use crate::data::Mnist;
use crate::error::{io_err, Error, Result};

/// Hyperparameters a grid may vary.
pub const GRID_KEYS: [&str; 7] = ["lambda", "gamma", "si-c", "xdg-pct", "n-fisher", "lr", "iters"];

/// A grid file: optional fixed settings plus value lists per swept key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridFile {
    pub fixed: ConfigFile,
    pub grid: BTreeMap<String, Vec<f64>>,
}

impl GridFile {
    /// Parses top-level settings (as in a config file) and a `[grid]` table
    /// of value lists.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(text).map_err(cfg)?;
        let grid = table
            .remove("grid")
            .ok_or_else(|| Error::Config("grid file has no [grid] table".into()))?;
        let grid: BTreeMap<String, Vec<f64>> = grid.try_into().map_err(cfg)?;
        let fixed: ConfigFile = toml::Value::Table(table).try_into().map_err(cfg)?;
        let g = GridFile { fixed, grid };
        g.check()?;
        Ok(g)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.values().any(Vec::is_empty) {
            return Err(Error::Config("grid must list at least one value per key".into()));
        }
        if let Some(k) = self.grid.keys().find(|k| !GRID_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("cannot sweep `{k}`; allowed: {}", GRID_KEYS.join(", "))));
        }
        Ok(())
    }

    /// Every combination of values, in row-major order of sorted keys.
    pub fn cells(&self) -> Vec<Vec<(String, f64)>> {
        let mut cells: Vec<Vec<(String, f64)>> = vec![Vec::new()];
        for (k, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.push((k.clone(), v));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Applies one swept value to `config`.
pub fn apply_grid_value(config: &mut RunConfig, key: &str, value: f64) -> Result<()> {
    let whole = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("`{key}` needs a positive integer, got {v}")))
        }
    };
    match key {
        "lambda" => config.hyper.lambda = value,
        "gamma" => config.hyper.gamma = value,
        "si-c" => config.hyper.si_c = value,
        "xdg-pct" => config.hyper.xdg_pct = value,
        "n-fisher" => config.hyper.n_fisher = Some(whole(value)?),
        "lr" => config.lr = value as f32,
        "iters" => config.iters = whole(value)?,
        _ => return Err(Error::Config(format!("cannot sweep `{key}`"))),
    }
    Ok(())
}

/// Result of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub values: Vec<(String, f64)>,
    pub average: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index of the cell with the highest average accuracy.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }

    /// CSV with one column per swept key, then `avg_accuracy` and `error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let Some(first) = self.cells.first() else {
            return Ok(());
        };
        let mut header: Vec<String> = first.values.iter().map(|(k, _)| k.clone()).collect();
        header.push("avg_accuracy".into());
        header.push("error".into());
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec: Vec<String> = c.values.iter().map(|(_, v)| v.to_string()).collect();
            rec.push(c.average.map(|a| format!("{a:.4}")).unwrap_or_default());
            rec.push(c.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Runs `template` once per grid cell and selects the cell with the best
/// average test accuracy. Cells whose configuration is invalid or whose run
/// fails are recorded with their error and excluded from selection.
pub fn grid_search(template: &RunConfig, grid: &GridFile, mnist: &Mnist, jobs: usize) -> Result<GridResult> {
    grid.check()?;
    template.validate()?;
    let cells = grid.cells();
    let mut configs = Vec::new();
    let mut slots = Vec::new();
    let mut results: Vec<GridCell> = Vec::with_capacity(cells.len());
    for values in cells {
        let mut c = template.clone();
        let applied = values
            .iter()
            .try_for_each(|(k, v)| apply_grid_value(&mut c, k, *v))
            .and_then(|_| c.validate());
        match applied {
            Ok(()) => {
                slots.push(results.len());
                configs.push(c);
                results.push(GridCell {
                    values,
                    average: None,
                    error: None,
                });
            }
            Err(e) => results.push(GridCell {
                values,
                average: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let log_done = |i: usize, r: &Result<super::RunReport>| match r {
        Ok(rep) => log::info!("grid cell {}: {}", i + 1, rep.summary()),
        Err(e) => log::warn!("grid cell {} failed: {e}", i + 1),
    };
    for (slot, run) in slots.into_iter().zip(run_many(&configs, mnist, jobs, &log_done)) {
        let cell = &mut results[slot];
        match run {
            Ok(rep) if rep.complete => cell.average = Some(rep.average),
            Ok(rep) => cell.error = rep.error.or_else(|| Some("incomplete run".into())),
            Err(e) => cell.error = Some(e.to_string()),
        }
    }
    let best = results
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.average.filter(|a| a.is_finite()).map(|a| (i, a)))
        .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((i, a)),
        })
        .map(|(i, _)| i);
    Ok(GridResult { cells: results, best })
}
