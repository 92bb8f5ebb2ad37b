use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcl_core::metrics::MetricSet;
use gcl_harness::ablate::{self, Axis};
use gcl_harness::features::write_feature_file;
use gcl_harness::output::{self, cell};
use gcl_harness::runner::{self, RunOptions};
use gcl_harness::{HarnessError, Result, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gcl", version, about = "Continual learning over blurry single-pass streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every seed, writing the run directory.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from per-seed checkpoints in the run directory.
        #[arg(long)]
        resume: bool,
        /// Config overrides such as `--lambda=100` or `stream.sessions=4`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run one ablation axis and write `ablate_<axis>.csv`.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the configured synthetic backbone to a feature file.
    GenFeatures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute headline metrics from a predictions log.
    Metrics {
        #[arg(long)]
        predictions: PathBuf,
        /// Number of sessions of the run; defaults to the one in the sibling config.json.
        #[arg(long)]
        sessions: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            resume,
            mut overrides,
        } => {
            let before = overrides.len();
            overrides.retain(|o| o != "--resume");
            let resume = resume || overrides.len() != before;
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            let result = runner::run(&config, &RunOptions { resume })?;
            let dir = output::write_run(&result)?;
            println!("run directory: {}", dir.display());
            let metrics: Vec<MetricSet> = result.outputs().map(|o| o.metrics.clone()).collect();
            print_metrics_table(result.outputs().map(|o| o.seed).zip(metrics.iter()));
            let failures = result.failures();
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("seed {} failed: {}", f.seed, f.message);
                }
                return Err(HarnessError::SeedsFailed {
                    failed: failures.len(),
                    total: result.seeds.len(),
                    numerical: failures.iter().any(|f| f.numerical),
                });
            }
            Ok(())
        }
        Command::Ablate {
            axis,
            config,
            overrides,
        } => {
            let axis: Axis = axis.parse()?;
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            let result = ablate::run(&config, axis)?;
            let path = ablate::write(&config, &result)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::GenFeatures { out, config, overrides } => {
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            let backbone = gcl_core::stream::SyntheticBackbone::new(config.synthetic());
            write_feature_file(&out, &backbone)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Metrics { predictions, sessions } => {
            let sessions = match sessions {
                Some(s) => s,
                None => sessions_from_config(&predictions)?,
            };
            let per_seed = output::recompute_metrics(&predictions, sessions)?;
            print_metrics_table(per_seed.iter().map(|(s, m)| (*s, m)));
            Ok(())
        }
    }
}

fn sessions_from_config(predictions: &std::path::Path) -> Result<usize> {
    let path = predictions.with_file_name(output::CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    value
        .pointer("/config/stream/sessions")
        .and_then(serde_json::Value::as_u64)
        .map(|s| s as usize)
        .ok_or_else(|| HarnessError::Config(format!("{}: no stream.sessions; pass --sessions", path.display())))
}

fn print_metrics_table<'a>(rows: impl Iterator<Item = (u64, &'a MetricSet)>) {
    println!("seed,{}", MetricSet::NAMES.join(","));
    for (seed, m) in rows {
        let cells: Vec<String> = m.values().iter().map(|v| cell(*v)).collect();
        println!("{seed},{}", cells.join(","));
    }
}
