//! `iteredit`: run editing sessions, experiments, training and self-checks.
//!
//! Exit codes: 0 success, 1 check or experiment failure, 2 configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{CliError, Outcome};

#[derive(Debug, Parser)]
#[command(name = "iteredit", version, about = "Iterative latent editing with diffusion samplers")]
struct Cli {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print machine-readable results on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for parallel experiments (outputs do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply every edit of a session config and write the outputs.
    RunSession { config: PathBuf },
    /// Drift of repeated identity edits per iteration strategy.
    BenchDrift { config: Option<PathBuf> },
    /// Inside/outside change of a masked edit per masking mode.
    BenchLocality { config: Option<PathBuf> },
    /// Langevin vs. reverse-diffusion moment gaps.
    BenchEbm { config: Option<PathBuf> },
    /// Train the tiny denoiser and compare it with the exact denoiser.
    Train { config: Option<PathBuf> },
    /// Run the built-in oracle and invariant checks.
    Verify {
        /// Break one input on purpose to confirm the suite fails.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    Schedule,
}

fn report(outcome: &Outcome, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(outcome).expect("serializable outcome"));
        return;
    }
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &outcome.outputs {
        println!("wrote {}", f.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let opts = commands::Options { seed: cli.seed, out: cli.out.clone() };
    let result = match &cli.command {
        Command::RunSession { config } => commands::run_session(config, &opts),
        Command::BenchDrift { config } => commands::bench_drift(config.as_deref(), &opts),
        Command::BenchLocality { config } => commands::bench_locality(config.as_deref(), &opts),
        Command::BenchEbm { config } => commands::bench_ebm(config.as_deref(), &opts),
        Command::Train { config } => commands::train(config.as_deref(), &opts),
        Command::Verify { inject_fault } => Ok(commands::verify(inject_fault.is_some())),
    };
    match result {
        Ok(outcome) => {
            report(&outcome, cli.json);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Run(_) => 1,
            })
        }
    }
}
