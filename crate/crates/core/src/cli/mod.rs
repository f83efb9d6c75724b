//! Command-line front end: `pretrain`, `finetune`, `sweep` and `report`.

mod report;
mod sweep;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use thiserror::Error;

pub use report::{cmd_report, ReportOutput};
pub use sweep::{cmd_sweep, SweepCell, SweepConfig, SweepOutput, COMPARISON_HEADER};

use crate::trainer::{run_to_dir, RunConfig, RunError, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 configuration, 3 infeasible budget, 4 data missing, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Run(RunError::Config(_)) => 2,
            CliError::Run(RunError::Budget(_)) => 3,
            CliError::Run(RunError::Data(_)) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "neuroselect",
    version,
    about = "Budget-constrained sparse fine-tuning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all parameters on the upstream data and write a checkpoint.
    Pretrain(RunArgs),
    /// Fine-tune under the configured selection policy and budget.
    Finetune(RunArgs),
    /// Fine-tune every policy x budget x seed cell and tabulate final accuracy.
    Sweep(SweepArgs),
    /// Collect accuracy and FLOPs-saved curves from finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config field, e.g. `--set policy=random --set seeds.data=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run or sweep directories.
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Sets `key` (dotted path) in `doc` to `raw` parsed as JSON, or as a string if it is not JSON.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override {key:?}: {part:?} is not inside an object"
            ))
        })?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| {
            CliError::Config(format!("override {key:?} does not address an object field"))
        })?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads a JSON document and applies overrides in order.
pub fn load_json(path: &Path, overrides: &[String]) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    Ok(doc)
}

/// Parses and validates a run config with overrides applied.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let doc = load_json(path, overrides)?;
    let config: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn cmd_run(args: &RunArgs, stage: Stage) -> Result<(), CliError> {
    let config = load_config(&args.config, &args.overrides)?;
    let (summary, paths) = run_to_dir(&config, stage, &args.out)?;
    let _ = writeln!(
        std::io::stdout(),
        "{stage} {}: final top-1 {:.4}\n  {}\n  {}\n  {}",
        summary.tag,
        summary.final_test_top1,
        paths.metrics.display(),
        paths.summary.display(),
        paths.checkpoint.display()
    );
    Ok(())
}

/// Executes one parsed command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Pretrain(a) => cmd_run(a, Stage::Pretrain),
        Command::Finetune(a) => cmd_run(a, Stage::Finetune),
        Command::Sweep(a) => {
            let sweep = SweepConfig::load(&a.run.config, &a.run.overrides)?;
            let out = cmd_sweep(&sweep, &a.run.out, a.jobs)?;
            let _ = writeln!(std::io::stdout(), "{}", out.comparison.display());
            Ok(())
        }
        Command::Report(a) => {
            let out = cmd_report(&a.run_dirs, &a.out)?;
            let _ = writeln!(
                std::io::stdout(),
                "{}\n{}",
                out.accuracy.display(),
                out.flops.display()
            );
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
