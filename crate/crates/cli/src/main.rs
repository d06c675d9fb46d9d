use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtss_core::experiment::{
    eval_checkpoints, grad_check_tasks, load_config, pretrain, render_report, simulate_schedule, ExperimentConfig,
};
use mtss_core::trainer::AggregationMode;

/// Multi-task self-supervised pre-training experiments.
#[derive(Parser)]
#[command(name = "mtss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the trunk on the configured tasks and write checkpoints.
    Pretrain(RunArgs),
    /// Evaluate every checkpoint in the output directory.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluation jobs to run at once.
        #[arg(long, default_value_t = 1)]
        parallel_evals: usize,
    },
    /// Compare analytic and numeric gradients of each task on a toy model.
    GradCheck(RunArgs),
    /// Run the aggregation schedule and report staleness and discards.
    SimulateSchedule(RunArgs),
    /// Summarize finished run directories.
    Report {
        /// Where to write report.md and curves.csv.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Output directories of pretrain/eval runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<experiment id>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the aggregation mode.
    #[arg(long)]
    mode: Option<AggregationMode>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.experiment.mode = mode;
        }
        if let Ok(bits) = std::env::var("MTSS_PRECISION") {
            cfg.experiment.precision = match bits.as_str() {
                "32" => 32,
                "64" => 64,
                other => bail!("MTSS_PRECISION must be 32 or 64, got `{other}`"),
            };
        }
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&cfg.experiment.id));
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let (cfg, out) = args.load()?;
            let summary = pretrain(&cfg, &out).with_context(|| format!("pretraining into {}", out.display()))?;
            println!(
                "{}: {} applies, cost {:.2}, {} checkpoints in {}",
                cfg.experiment.id,
                summary.applies,
                summary.cost,
                summary.checkpoints.len(),
                out.display()
            );
        }
        Command::Eval { run, parallel_evals } => {
            let (cfg, out) = run.load()?;
            let records = eval_checkpoints(&cfg, &out, parallel_evals)
                .with_context(|| format!("evaluating checkpoints in {}", out.display()))?;
            for r in &records {
                let metric = ["accuracy", "pct_below_1_25"]
                    .iter()
                    .find_map(|k| r.get_f64(k).map(|v| format!("{k} {v:.4}")))
                    .unwrap_or_default();
                println!(
                    "checkpoint {} cost {:.2} {}: {metric}",
                    r.get_f64("checkpoint").unwrap_or(0.0),
                    r.cost,
                    r.get_str("eval").unwrap_or("?")
                );
            }
        }
        Command::GradCheck(args) => {
            let (cfg, _) = args.load()?;
            let mut failed = false;
            for r in grad_check_tasks(&cfg)? {
                let status = if r.report.pass { "ok" } else { "FAIL" };
                println!(
                    "{status} {} (lasso {}): max relative error {:.3e} (tolerance {:.0e})",
                    r.task, r.lasso, r.report.max_relative_error, r.report.tolerance
                );
                failed |= !r.report.pass;
            }
            if failed {
                bail!("gradient check failed");
            }
        }
        Command::SimulateSchedule(args) => {
            let (cfg, out) = args.load()?;
            let report = simulate_schedule(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { out, runs } => {
            let files = render_report(&runs, &out)?;
            println!("wrote {} and {}", files.report.display(), files.curves.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
