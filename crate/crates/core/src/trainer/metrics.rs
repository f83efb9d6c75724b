use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunConfig, RunError};
use crate::engine::Precision;
use crate::selection::PolicyTag;

pub const METRICS_HEADER: &str =
    "epoch,lr,train_loss,test_top1,policy,mask_neurons,mask_cost,budget,flops_saved_pct,seconds";

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_top1: f64,
    pub policy: PolicyTag,
    pub mask_neurons: usize,
    pub mask_cost: u64,
    pub budget: u64,
    pub flops_saved_pct: f64,
    /// Wall-clock time of the epoch; empty in the CSV unless requested.
    pub seconds: Option<f64>,
}

fn io_err(path: &Path, e: impl ToString) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes the records under [`METRICS_HEADER`]. Wall times are blanked unless `with_seconds`.
pub fn write_metrics(
    path: &Path,
    records: &[EpochRecord],
    with_seconds: bool,
) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in records {
        let mut row = r.clone();
        if !with_seconds {
            row.seconds = None;
        }
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != METRICS_HEADER {
        return Err(io_err(path, format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .collect::<Result<Vec<EpochRecord>, _>>()
        .map_err(|e| io_err(path, e))
}

/// Run-level results written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tag: String,
    pub stage: String,
    pub policy: PolicyTag,
    pub precision: Precision,
    pub total_params: u64,
    pub neurons: usize,
    pub budget_params: u64,
    pub pinned_cost: u64,
    pub epochs: usize,
    pub final_test_top1: f64,
    pub best_test_top1: f64,
    pub mean_flops_saved_pct: f64,
    pub train_samples: usize,
    pub eval_subset_samples: usize,
    pub test_samples: usize,
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub config: RunConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.1 / epoch as f64,
            train_loss: 1.0 / 3.0,
            test_top1: 0.5,
            policy: PolicyTag::Velocity,
            mask_neurons: 4,
            mask_cost: 40,
            budget: 44,
            flops_saved_pct: 12.5,
            seconds: Some(0.25),
        }
    }

    #[test]
    fn header_and_blank_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &[record(1), record(2)], false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(lines.next().unwrap().ends_with(",12.5,"));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].lr, 0.05);
        assert_eq!(back[0].seconds, None);

        write_metrics(&path, &[record(1)], true).unwrap();
        assert_eq!(read_metrics(&path).unwrap()[0].seconds, Some(0.25));
    }
}
