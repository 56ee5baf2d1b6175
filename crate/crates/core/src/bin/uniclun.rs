use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uniclun::experiment::{self, ExperimentConfig, ExperimentError};
use uniclun::losses::ObjectiveMode;
use uniclun::verify::{self, VerifyOptions};

/// Continual learning and unlearning experiments on synthetic task streams.
#[derive(Debug, Parser)]
#[command(name = "uniclun", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scripted stream and write the accuracy table, summary and checkpoints.
    Run(RunArgs),
    /// Run every capacity x seed combination and fit the trade-off model.
    Sweep(SweepArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the objective mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ObjectiveMode>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated buffer capacities.
    #[arg(long, value_delimiter = ',')]
    capacities: Option<Vec<usize>>,
    /// Parallel runs (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Seed of the randomized suites.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_mode(s: &str) -> Result<ObjectiveMode, String> {
    s.parse().map_err(|e: uniclun::losses::LossError| e.to_string())
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.hyper.objective_mode = mode;
    }
    cfg.output_dir = match &common.out {
        Some(out) => out.clone(),
        None => experiment::resolve_output_dir(&cfg),
    };
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<(), ExperimentError> {
    let cfg = load(&args.common)?;
    let script = cfg.read_script()?;
    let outcome = experiment::run_stream(&cfg, &script)?;
    experiment::write_run_outputs(&cfg.output_dir, &outcome)?;
    print!("{}", outcome.matrix.to_csv());
    eprintln!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), ExperimentError> {
    let cfg = load(&args.common)?;
    let script = cfg.read_script()?;
    let capacities = args.capacities.clone().unwrap_or_else(|| cfg.sweep.capacities.clone());
    let workers = args.workers.unwrap_or(cfg.sweep.workers);
    let seeds: Vec<u64> = (0..cfg.sweep.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let outcome = experiment::run_sweep(&cfg, &script, &capacities, &seeds, workers, Some(&cfg.output_dir))?;
    experiment::write_sweep_outputs(&cfg.output_dir, &outcome)?;
    print!("{}", outcome.series_csv());
    let fit = &outcome.fit;
    println!(
        "fit alpha={} beta={} rss={} degenerate={} runs={}",
        fit.model.alpha,
        fit.model.beta,
        fit.rss,
        fit.degenerate,
        outcome.runs.len()
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> bool {
    let reports = verify::run_all(&VerifyOptions { seed: args.seed, ..Default::default() });
    for r in &reports {
        println!("{r}");
    }
    reports.iter().all(|r| r.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => {
            return if cmd_verify(args) { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
