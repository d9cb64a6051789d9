//! Result files: long-form CSV, per-method summary CSV and the JSON-lines run log.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::run::MetricsReport;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const LOG_FILE: &str = "run_log.jsonl";

/// One row of the long-form results file. `task` and `client` are empty for
/// run-level metrics; `client` is `all` for the combined matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub task: String,
    pub client: String,
    pub metric: String,
    pub value: f64,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub log: PathBuf,
}

pub fn result_rows(report: &MetricsReport) -> Vec<ResultRow> {
    let row = |task: String, client: String, metric: String, value: f64| ResultRow {
        method: report.method.name().into(),
        dataset: report.dataset.clone(),
        seed: report.seed,
        task,
        client,
        metric,
        value,
    };
    let mut rows = vec![row(String::new(), "all".into(), "am".into(), report.am)];
    if let Some(fm) = report.fm {
        rows.push(row(String::new(), "all".into(), "fm".into(), fm));
    }
    let matrices = std::iter::once(("all".to_string(), &report.combined))
        .chain(report.clients.iter().map(|c| (c.client.to_string(), &c.accuracy)));
    for (client, m) in matrices {
        for (i, r) in m.rows().iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                rows.push(row(j.to_string(), client.clone(), format!("acc_after_task_{i}"), v));
            }
        }
    }
    for p in &report.rounds {
        rows.push(row(p.task.to_string(), "all".into(), format!("am_round_{}", p.round), p.am));
    }
    rows
}

/// Groups AM/FM by method and dataset. A single run has std 0.
pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, &str), Vec<f64>> = BTreeMap::new();
    for r in reports {
        let key = |metric| (r.method.name().to_string(), r.dataset.clone(), metric);
        groups.entry(key("am")).or_default().push(r.am);
        if let Some(fm) = r.fm {
            groups.entry(key("fm")).or_default().push(fm);
        }
    }
    groups
        .into_iter()
        .map(|((method, dataset, metric), values)| {
            let (mean, std) = mean_std(&values);
            SummaryRow {
                method,
                dataset,
                metric: metric.into(),
                runs: values.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Arithmetic mean and sample standard deviation (0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the three result files into `dir`, creating it if needed.
pub fn export(reports: &[MetricsReport], dir: impl AsRef<Path>) -> Result<ExportPaths> {
    if reports.is_empty() {
        return Err(Error::Invalid("nothing to export".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ExportPaths {
        results: dir.join(RESULTS_FILE),
        summary: dir.join(SUMMARY_FILE),
        log: dir.join(LOG_FILE),
    };
    let rows: Vec<ResultRow> = reports.iter().flat_map(result_rows).collect();
    write_csv(&paths.results, &rows)?;
    write_csv(&paths.summary, &summarize(reports))?;

    let file = File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    let mut w = BufWriter::new(file);
    for r in reports {
        let header = serde_json::json!({
            "kind": "run",
            "method": r.method,
            "dataset": r.dataset,
            "seed": r.seed,
            "config": r.config,
        });
        writeln!(w, "{header}").map_err(|e| Error::io(&paths.log, e))?;
        for rec in &r.log {
            let mut value = serde_json::to_value(rec)?;
            value["method"] = serde_json::json!(r.method);
            value["seed"] = serde_json::json!(r.seed);
            writeln!(w, "{value}").map_err(|e| Error::io(&paths.log, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.log, e))?;
    Ok(paths)
}

/// Reads a results file back.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
