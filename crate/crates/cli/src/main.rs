use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedzoo::error::FedZooError;
use fedzoo::federation::Algorithm;
use fedzoo::harness::{self, ExperimentConfig, ExperimentOutput};

/// Federated zeroth-order optimization experiments.
#[derive(Parser)]
#[command(name = "fedzoo", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured algorithm for every seed.
    Run { config: PathBuf },
    /// Run a chosen set of algorithms and write a side-by-side table.
    Compare {
        config: PathBuf,
        /// Comma-separated, e.g. `fedzo,scaffold2,fzoos`.
        #[arg(long, value_delimiter = ',', required = true)]
        algorithms: Vec<String>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();

    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn execute(command: Command) -> Result<(), FedZooError> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            report(&cfg.output_dir, &harness::run_experiment(&cfg)?);
        }
        Command::Compare { config, algorithms } => {
            let cfg = ExperimentConfig::load(&config)?;
            let algorithms = algorithms
                .iter()
                .map(|a| a.parse::<Algorithm>())
                .collect::<Result<Vec<_>, _>>()?;
            report(&cfg.output_dir, &harness::compare_algorithms(&cfg, &algorithms)?);
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let names: Vec<&str> = cfg.algorithms.iter().map(|a| a.name()).collect();
            println!(
                "ok: {} x {} seed(s), d={}, N={}, C={}, R={}, T={}, output_dir={}",
                names.join(","),
                cfg.seeds.len(),
                cfg.dim,
                cfg.clients,
                cfg.heterogeneity,
                cfg.rounds,
                cfg.local_iterations,
                cfg.output_dir.display()
            );
        }
    }
    Ok(())
}

fn report(dir: &Path, out: &ExperimentOutput) {
    for t in &out.traces {
        let last = t.final_record();
        log::info!(
            "{} seed {}: F = {:.6e}, error = {}",
            t.algorithm,
            t.seed,
            last.f_value,
            last.conv_error.map_or("n/a".to_string(), |e| format!("{e:.6e}"))
        );
    }
    println!("wrote {} file(s) to {}", out.files.len(), dir.display());
    for f in &out.files {
        println!("  {}", f.display());
    }
}
