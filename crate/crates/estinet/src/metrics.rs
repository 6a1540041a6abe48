//! Metrics persistence: append-only line-delimited JSON records, plus CSV
//! emission for plots and tables.
//!
//! The JSONL store carries wall-clock timings for diagnostics; CSV exports
//! hold only seed-determined values, so rerunning a command with the same
//! config and seeds reproduces them byte for byte.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::oracle::LogicOp;
use crate::train::{EpochMetrics, LossBreakdown};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: LossBreakdown,
    pub task_accuracy: f64,
    pub selector_op: f64,
    pub selector_col: f64,
    pub selector_arg: f64,
    pub violation_rate: f64,
    pub test_accuracy: Option<f64>,
    pub inference_accuracy: Option<f64>,
    pub estilayer_train: Vec<(LogicOp, f64)>,
    pub estilayer_test: Vec<(LogicOp, f64)>,
    pub wall_secs: f64,
}

impl MetricsRecord {
    pub fn from_epoch(run_id: &str, seed: u64, split: &str, m: &EpochMetrics) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            epoch: m.epoch,
            split: split.to_string(),
            loss: m.loss,
            task_accuracy: m.train_accuracy,
            selector_op: m.selector_op,
            selector_col: m.selector_col,
            selector_arg: m.selector_arg,
            violation_rate: m.violation_rate,
            test_accuracy: m.test_accuracy,
            inference_accuracy: m.inference_accuracy,
            estilayer_train: m.estilayer_train.clone(),
            estilayer_test: m.estilayer_test.clone(),
            wall_secs: m.wall_secs,
        }
    }
}

/// Appends records to a JSONL file (creating it if needed). Append-only so
/// concurrent runs may share one store under distinct run ids.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    f.write_all(&buf)
}

/// Reads every record of a JSONL metrics store.
pub fn read_records(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Fixed-format float for byte-stable CSV output.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes rows as CSV with a header. All floats must already be formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(run: &str, epoch: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: run.into(),
            seed: 1,
            epoch,
            split: "train".into(),
            loss: LossBreakdown { l_model: 0.5, l_online_soft: 0.1, l_online_hard: 0.2, total: 0.8 },
            task_accuracy: 0.75,
            selector_op: 0.9,
            selector_col: 0.8,
            selector_arg: 0.7,
            violation_rate: 0.01,
            test_accuracy: Some(0.4),
            inference_accuracy: Some(0.9),
            estilayer_train: vec![(LogicOp::Max, 0.99)],
            estilayer_test: vec![(LogicOp::Max, 0.5)],
            wall_secs: 1.25,
        }
    }

    #[test]
    fn jsonl_round_trip_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        append_records(&path, &[record("a", 0), record("a", 1)]).unwrap();
        append_records(&path, &[record("b", 0)]).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].run_id, "b");
        assert_eq!(back[1].epoch, 1);
        assert_eq!(back[0].estilayer_train, vec![(LogicOp::Max, 0.99)]);
    }

    #[test]
    fn csv_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let rows = vec![vec!["0".to_string(), fmt_f(0.123456789)]];
        write_csv(&a, &["epoch", "acc"], &rows).unwrap();
        write_csv(&b, &["epoch", "acc"], &rows).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read_to_string(&a).unwrap(), "epoch,acc\n0,0.123457\n");
    }
}
