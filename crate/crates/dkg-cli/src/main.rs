//! Command-line front end: validate and run experiment configs, emit the
//! one-dimensional illustration tables, and list the benchmark registry.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for failures
//! while running or writing results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dkg_cli::config::parse_config;
use dkg_cli::runner::{emit_figure1, run_experiment, RunnerError};

#[derive(Parser)]
#[command(
    name = "dkg",
    about = "Batch Bayesian optimization with derivative observations"
)]
struct Cli {
    /// Maximum number of replications to run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment: one trace CSV per replication plus an
    /// aggregate CSV and metadata JSON.
    Run { config: PathBuf },
    /// Write the 1-d illustration tables (posterior and acquisition curves)
    /// for the config's seed.
    Fig1 { config: PathBuf },
    /// Print the benchmark registry.
    ListBenchmarks,
    /// Parse a config and print the resolved settings.
    Validate { config: PathBuf },
}

fn list_benchmarks() {
    println!(
        "{:<12} {:>3} {:>2} {:>14}  {:<8} bounds",
        "name", "dim", "q", "f_star", "mask"
    );
    for def in dkg_core::benchmark_registry() {
        let mask: String = def
            .default_mask
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        let bounds: Vec<String> = def
            .bounds
            .iter()
            .map(|(lo, hi)| format!("[{lo}, {hi}]"))
            .collect();
        println!(
            "{:<12} {:>3} {:>2} {:>14.6}  {:<8} {}",
            def.name,
            def.dim,
            def.default_q,
            def.f_star,
            mask,
            bounds.join(" x ")
        );
    }
}

fn validate(path: &PathBuf) -> Result<(), RunnerError> {
    let config = parse_config(path).map_err(RunnerError::Config)?;
    let resolved = config.resolve().map_err(RunnerError::Config)?;
    println!("config ok: {}", path.display());
    println!("  benchmark    {} (dim {})", resolved.def.name, resolved.def.dim);
    println!("  acquisition  {}", config.acquisition.as_str());
    println!("  mode         {}", resolved.mode.as_str());
    let mask: String = resolved
        .problem
        .mask
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect();
    println!("  mask         {mask}");
    println!("  q            {}", resolved.problem.q);
    println!("  iterations   {}", resolved.problem.iterations);
    println!("  replications {}", config.replications);
    println!("  noise_sd     {}", config.noise_sd);
    println!("  fantasies    {}", resolved.problem.fantasies);
    println!("  seed         {}", config.seed);
    println!("  output_dir   {}", resolved.output_dir.display());
    Ok(())
}

fn run(path: &PathBuf, jobs: usize) -> Result<(), RunnerError> {
    let config = parse_config(path).map_err(RunnerError::Config)?;
    let summary = run_experiment(&config, jobs)?;
    for o in &summary.outcomes {
        match (&o.trace_file, &o.error) {
            (Some(file), None) => println!(
                "replication {:>3}: seed {} -> {} ({} rows, final log10 regret {})",
                o.index,
                o.seed,
                file,
                o.rows,
                o.final_log10_regret
                    .map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
            ),
            (file, Some(err)) => println!(
                "replication {:>3}: seed {} FAILED{}: {err}",
                o.index,
                o.seed,
                file.as_deref()
                    .map_or_else(String::new, |f| format!(" (partial trace {f})")),
            ),
            (None, None) => unreachable!("an outcome has either a file or an error"),
        }
    }
    let completed = summary.outcomes.iter().filter(|o| o.complete).count();
    println!(
        "{} of {} replications aggregated over {} iterations in {}",
        completed,
        summary.outcomes.len(),
        summary.aggregate_rows,
        summary.output_dir.display()
    );
    Ok(())
}

fn fig1(path: &PathBuf) -> Result<(), RunnerError> {
    let config = parse_config(path).map_err(RunnerError::Config)?;
    let dir = emit_figure1(&config)?;
    println!(
        "wrote fig1_grid.csv, fig1_picks.csv, fig1_meta.json to {}",
        dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run(config, cli.jobs),
        Command::Fig1 { config } => fig1(config),
        Command::ListBenchmarks => {
            list_benchmarks();
            Ok(())
        }
        Command::Validate { config } => validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RunnerError::Config(_) => ExitCode::from(2),
                RunnerError::Run(_) => ExitCode::from(3),
            }
        }
    }
}
