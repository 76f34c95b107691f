use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::config::Method;
use super::report::{mean, read_rows, ReportRow};
use crate::data::{Protocol, Scenario};
use crate::error::{io_err, Result};

/// Mean and standard error of the average accuracy over seeds for one
/// protocol, method and scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub protocol: Protocol,
    pub method: Method,
    pub scenario: Scenario,
    pub seeds: usize,
    pub mean: f64,
    pub sem: f64,
    pub mean_seconds: f64,
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`);
/// zero for fewer than two values.
pub fn sem(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Collapses per-task rows into one summary per protocol, method and
/// scenario. Each seed counts once.
pub fn summarize(rows: &[ReportRow]) -> Result<Vec<Summary>> {
    let mut runs: BTreeMap<(Protocol, Method, Scenario), BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
    for r in rows {
        let key = (r.protocol.parse()?, r.method.parse()?, r.scenario.parse()?);
        runs.entry(key).or_default().insert(r.seed, (r.avg_accuracy, r.train_seconds));
    }
    Ok(runs
        .into_iter()
        .map(|((protocol, method, scenario), seeds)| {
            let accs: Vec<f64> = seeds.values().map(|v| v.0).collect();
            let secs: Vec<f64> = seeds.values().map(|v| v.1).collect();
            Summary {
                protocol,
                method,
                scenario,
                seeds: accs.len(),
                mean: mean(&accs),
                sem: sem(&accs),
                mean_seconds: mean(&secs),
            }
        })
        .collect())
}

/// Reads every report CSV in `dir`; files with another layout are skipped.
pub fn read_report_dir(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        match read_rows(&p) {
            Ok(r) => rows.extend(r),
            Err(e) => log::info!("skipping {}: {e}", p.display()),
        }
    }
    Ok(rows)
}

/// Writes one line per protocol and method with mean and standard error
/// for each scenario; scenarios without runs are left empty.
pub fn write_table(out: &mut impl Write, summaries: &[Summary]) -> std::io::Result<()> {
    writeln!(
        out,
        "protocol,method,task_il,task_il_sem,domain_il,domain_il_sem,class_il,class_il_sem,seeds,train_seconds"
    )?;
    let mut by_row: BTreeMap<(Protocol, Method), Vec<&Summary>> = BTreeMap::new();
    for s in summaries {
        by_row.entry((s.protocol, s.method)).or_default().push(s);
    }
    for ((protocol, method), group) in by_row {
        let mut line = format!("{protocol},{}", method.label());
        for scenario in Scenario::ALL {
            match group.iter().find(|s| s.scenario == scenario) {
                Some(s) => line.push_str(&format!(",{:.2},{:.2}", s.mean, s.sem)),
                None => line.push_str(",,"),
            }
        }
        let seeds = group.iter().map(|s| s.seeds).max().unwrap_or(0);
        let secs = mean(&group.iter().map(|s| s.mean_seconds).collect::<Vec<_>>());
        line.push_str(&format!(",{seeds},{secs:.1}"));
        writeln!(out, "{line}")?;
    }
    Ok(())
}
