//! Metrics persistence: a JSON report of per-run metric records and a CSV
//! export for supervision-sweep tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::SweepRow;
use crate::error::{Error, Result};

/// One evaluated run. `median` aggregates the group of `n_runs` runs this
/// record belongs to, so every record of a group carries the same value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub task: String,
    pub pooling: String,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
    pub n_runs: usize,
    pub median: f64,
}

/// Writes metric records as pretty JSON (stable field order, trailing
/// newline) so identical results are byte-identical on disk.
pub fn save_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        if !(r.value.is_finite() && r.median.is_finite()) {
            return Err(Error::NonFinite(format!(
                "metric {} for task {}",
                r.metric_name, r.task
            )));
        }
    }
    let mut text = serde_json::to_string_pretty(records)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("metric serialization failed: {e}"),
        })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a metric report written by [`save_metrics`].
pub fn load_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: format!("invalid metric report: {e}"),
    })
}

pub const SWEEP_CSV_HEADER: &str = "budget,run,macro_f1";

/// Writes sweep rows as CSV with a fixed header.
pub fn save_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::with_capacity(24 * (rows.len() + 1));
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.budget, r.run, r.macro_f1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a sweep table written by [`save_sweep_csv`].
pub fn load_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == SWEEP_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header {SWEEP_CSV_HEADER:?}, found {header:?}"),
            ))
        }
        None => return Err(Error::parse(path, 1, "empty sweep file")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let budget: usize = fields[0]
            .parse()
            .map_err(|e| Error::parse(path, lineno, format!("bad budget: {e}")))?;
        let run: usize = fields[1]
            .parse()
            .map_err(|e| Error::parse(path, lineno, format!("bad run: {e}")))?;
        let macro_f1: f64 = fields[2]
            .parse()
            .map_err(|e| Error::parse(path, lineno, format!("bad macro_f1: {e}")))?;
        if !macro_f1.is_finite() {
            return Err(Error::parse(path, lineno, "non-finite macro_f1"));
        }
        rows.push(SweepRow {
            budget,
            run,
            macro_f1,
        });
    }
    Ok(rows)
}
