use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{load_json, CliError};
use crate::selection::PolicyTag;
use crate::trainer::{run_to_dir, Budget, RunConfig, Seeds, Stage};

pub const COMPARISON_HEADER: &str = "policy,budget,budget_params,runs,mean_top1,std_top1,warning";

/// A base run config and the axes to cross.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub policies: Vec<PolicyTag>,
    pub budgets: Vec<Budget>,
    /// Each seed sets the weight, data and selection seeds of a cell.
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let doc = load_json(path, overrides)?;
        let sweep: SweepConfig = serde_json::from_value(doc)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        sweep
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(sweep)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.policies.is_empty() || self.budgets.is_empty() || self.seeds.is_empty() {
            return Err("policies, budgets and seeds must all be non-empty".into());
        }
        for cell in self.cells() {
            cell.validate()?;
        }
        Ok(())
    }

    /// One config per (policy, budget, seed), policy-major.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &policy in &self.policies {
            for &budget in &self.budgets {
                for &seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.policy = policy;
                    c.budget = budget;
                    c.seeds = Seeds::all(seed);
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub policy: PolicyTag,
    pub budget: String,
    pub seed: u64,
    pub budget_params: Option<u64>,
    pub final_top1: Option<f64>,
    pub error: Option<String>,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    pub comparison: PathBuf,
    pub cells_csv: PathBuf,
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Other(format!("{}: {}", path.display(), e.to_string()))
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every cell (up to `jobs` at a time) into `out/<tag>/`, then writes
/// `sweep_cells.csv` and `comparison.csv`. Failed cells are reported, not fatal.
pub fn cmd_sweep(sweep: &SweepConfig, out: &Path, jobs: usize) -> Result<SweepOutput, CliError> {
    sweep.validate().map_err(CliError::Config)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let configs = sweep.cells();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = configs.get(i) else { break };
                let run_dir = out.join(config.tag());
                let outcome = run_to_dir(config, Stage::Finetune, &run_dir);
                if let Err(e) = &outcome {
                    log::warn!("cell {} failed: {e}", config.tag());
                }
                let cell = SweepCell {
                    policy: config.policy,
                    budget: config.budget.label(),
                    seed: config.seeds.weights,
                    budget_params: outcome.as_ref().ok().map(|(s, _)| s.budget_params),
                    final_top1: outcome.as_ref().ok().map(|(s, _)| s.final_test_top1),
                    error: outcome.err().map(|e| e.to_string()),
                    run_dir,
                };
                results.lock().expect("no poisoned cells")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<SweepCell> = results
        .into_inner()
        .expect("no poisoned cells")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();

    let cells_csv = out.join("sweep_cells.csv");
    let mut w = csv::Writer::from_path(&cells_csv).map_err(|e| io_err(&cells_csv, e))?;
    for c in &cells {
        w.serialize(c).map_err(|e| io_err(&cells_csv, e))?;
    }
    w.flush().map_err(|e| io_err(&cells_csv, e))?;

    let mut groups: BTreeMap<(usize, usize), Vec<&SweepCell>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        let per_policy = sweep.budgets.len() * sweep.seeds.len();
        groups
            .entry((i / per_policy, (i % per_policy) / sweep.seeds.len()))
            .or_default()
            .push(c);
    }
    let comparison = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&comparison).map_err(|e| io_err(&comparison, e))?;
    w.write_record(COMPARISON_HEADER.split(','))
        .map_err(|e| io_err(&comparison, e))?;
    for group in groups.values() {
        let done: Vec<f64> = group.iter().filter_map(|c| c.final_top1).collect();
        let failed: Vec<String> = group
            .iter()
            .filter(|c| c.error.is_some())
            .map(|c| format!("seed {} failed", c.seed))
            .collect();
        let (mean, std) = if done.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_std(&done);
            (m.to_string(), s.to_string())
        };
        let params = group
            .iter()
            .find_map(|c| c.budget_params)
            .map(|p| p.to_string())
            .unwrap_or_default();
        w.write_record([
            group[0].policy.to_string(),
            group[0].budget.clone(),
            params,
            done.len().to_string(),
            mean,
            std,
            failed.join("; "),
        ])
        .map_err(|e| io_err(&comparison, e))?;
    }
    w.flush().map_err(|e| io_err(&comparison, e))?;
    Ok(SweepOutput {
        cells,
        comparison,
        cells_csv,
    })
}
