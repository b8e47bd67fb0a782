//! Loss-curve persistence: a plain CSV with a fixed header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pretrain::LossRow;

pub const LOSS_CSV_HEADER: &str = "step,loss_total,loss_social,loss_mlm";

/// Writes the loss curve as CSV (header plus one row per step).
pub fn save_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(LOSS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss_total, r.loss_social, r.loss_mlm
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a loss curve written by [`save_loss_csv`].
pub fn load_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == LOSS_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header {LOSS_CSV_HEADER:?}, found {header:?}"),
            ))
        }
        None => return Err(Error::parse(path, 1, "empty loss file")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let step: usize = fields[0]
            .parse()
            .map_err(|e| Error::parse(path, lineno, format!("bad step: {e}")))?;
        let mut vals = [0.0; 3];
        for (slot, field) in vals.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| Error::parse(path, lineno, format!("bad loss value: {e}")))?;
            if !slot.is_finite() {
                return Err(Error::parse(path, lineno, "non-finite loss value"));
            }
        }
        rows.push(LossRow {
            step,
            loss_total: vals[0],
            loss_social: vals[1],
            loss_mlm: vals[2],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rows() -> Vec<LossRow> {
        vec![
            LossRow {
                step: 1,
                loss_total: 6.5,
                loss_social: 2.25,
                loss_mlm: 85.0,
            },
            LossRow {
                step: 2,
                loss_total: 6.0078125,
                loss_social: 2.0,
                loss_mlm: 80.15625,
            },
        ]
    }

    #[test]
    fn loss_csv_round_trips_and_has_the_fixed_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        save_loss_csv(&path, &rows()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,loss_total,loss_social,loss_mlm"));
        assert_eq!(lines.next(), Some("1,6.5,2.25,85"));
        let back = load_loss_csv(&path).unwrap();
        assert_eq!(back, rows());
    }

    #[test]
    fn malformed_loss_files_are_rejected_with_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("loss.csv");

        std::fs::write(&path, "step,total\n1,2\n").unwrap();
        let err = load_loss_csv(&path).unwrap_err().to_string();
        assert!(err.contains("header"), "{err}");

        std::fs::write(&path, "step,loss_total,loss_social,loss_mlm\n1,2,3\n").unwrap();
        let err = load_loss_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("4 fields"), "{err}");

        std::fs::write(&path, "step,loss_total,loss_social,loss_mlm\n1,2,x,4\n").unwrap();
        let err = load_loss_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("bad loss value"), "{err}");

        std::fs::write(&path, "step,loss_total,loss_social,loss_mlm\n1,NaN,3,4\n").unwrap();
        let err = load_loss_csv(&path).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }
}
