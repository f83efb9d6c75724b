use std::path::{Path, PathBuf};

use super::CliError;
use crate::trainer::{read_metrics, EpochRecord, RunSummary};

#[derive(Clone, Debug)]
pub struct ReportOutput {
    pub accuracy: PathBuf,
    pub flops: PathBuf,
    /// Curve ids, one per run found.
    pub curves: Vec<String>,
    /// Directories or files that were skipped, with the reason.
    pub warnings: Vec<String>,
}

struct Curve {
    id: String,
    summary: RunSummary,
    records: Vec<EpochRecord>,
}

fn metrics_files(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() && depth > 0 {
            metrics_files(&path, depth - 1, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with("_metrics.csv"))
        {
            out.push(path);
        }
    }
    Ok(())
}

fn load_curve(metrics: &Path) -> Result<Curve, String> {
    let name = metrics
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or("non-UTF-8 file name")?;
    let id = name.trim_end_matches("_metrics.csv").to_string();
    let summary_path = metrics.with_file_name(format!("{id}_summary.json"));
    let text = std::fs::read_to_string(&summary_path)
        .map_err(|e| format!("{}: {e}", summary_path.display()))?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", summary_path.display()))?;
    let records = read_metrics(metrics).map_err(|e| e.to_string())?;
    if records.is_empty() {
        return Err(format!("{}: no epochs", metrics.display()));
    }
    Ok(Curve {
        id,
        summary,
        records,
    })
}

/// Gathers every run under `run_dirs` (a run directory or a sweep directory of
/// runs) into `accuracy_vs_epoch.csv` and `flops_saved_vs_epoch.csv` in `out`.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutput, CliError> {
    let mut warnings = Vec::new();
    let mut curves = Vec::new();
    for dir in run_dirs {
        let mut files = Vec::new();
        if let Err(e) = metrics_files(dir, 1, &mut files) {
            warnings.push(format!("{}: {e}", dir.display()));
            continue;
        }
        if files.is_empty() {
            warnings.push(format!("{}: no metrics files", dir.display()));
        }
        for f in files {
            match load_curve(&f) {
                Ok(c) => curves.push(c),
                Err(e) => warnings.push(e),
            }
        }
    }
    for w in &warnings {
        log::warn!("report: skipped {w}");
    }
    if curves.is_empty() {
        return Err(CliError::Other("no completed runs found".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
    let accuracy = out.join("accuracy_vs_epoch.csv");
    let flops = out.join("flops_saved_vs_epoch.csv");
    write_curves(&accuracy, "test_top1", &curves, |r| r.test_top1)?;
    write_curves(&flops, "flops_saved_pct", &curves, |r| r.flops_saved_pct)?;
    Ok(ReportOutput {
        accuracy,
        flops,
        curves: curves.into_iter().map(|c| c.id).collect(),
        warnings,
    })
}

fn write_curves(
    path: &Path,
    column: &str,
    curves: &[Curve],
    value: impl Fn(&EpochRecord) -> f64,
) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "curve", "stage", "policy", "budget", "seed", "epoch", column,
    ])
    .map_err(err)?;
    for c in curves {
        let cfg = &c.summary.config;
        for r in &c.records {
            w.write_record([
                c.id.clone(),
                c.summary.stage.clone(),
                r.policy.to_string(),
                cfg.budget.label(),
                cfg.seeds.label(),
                r.epoch.to_string(),
                value(r).to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush()
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}
