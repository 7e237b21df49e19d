//! `hamlearn` binary: config-driven pipeline commands.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure, 3 failed
//! `--check` assertions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hamlearn::commands::{self, CommandContext};
use hamlearn::{par, Error};

/// Learn separable Hamiltonians from sparse noisy trajectory data, recover
/// symbolic structure from the trained models, and verify the noise-bias
/// scaling laws by Monte Carlo.
#[derive(Parser)]
#[command(name = "hamlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-member sparse training datasets plus a manifest
    Generate(RunArgs),
    /// Train the model ensemble on the generated datasets
    Train(RunArgs),
    /// Roll trained models forward and tabulate energy conservation
    Predict(RunArgs),
    /// Evaluate the ensemble's energy error over a parameter grid
    Sweep(RunArgs),
    /// Recover symbolic equations from the trained models
    Symreg(RunArgs),
    /// Run the Monte-Carlo noise diagnostics and write their tables
    VerifyTheory(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the run-config JSON document
    #[arg(long)]
    config: PathBuf,
    /// Also run this command's acceptance assertions
    #[arg(long)]
    check: bool,
    /// Worker threads for the data-parallel sections
    #[arg(long)]
    threads: Option<usize>,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Generate(a) => ("generate", a),
        Command::Train(a) => ("train", a),
        Command::Predict(a) => ("predict", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Symreg(a) => ("symreg", a),
        Command::VerifyTheory(a) => ("verify-theory", a),
    };
    match run(name, args) {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            for f in &failures {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(3)
        }
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(name: &str, args: &RunArgs) -> Result<Vec<String>, (u8, Error)> {
    if let Some(n) = args.threads {
        par::configure_threads(n);
    }
    // Everything up to a validated context is a config error (exit 1);
    // failures during the command itself are runtime (exit 2) unless they
    // stem from bad settings or missing inputs.
    let seed_override = seed_from_env().map_err(|e| (1, e))?;
    let ctx = CommandContext::new(&args.config, seed_override, args.out.clone(), args.check)
        .map_err(|e| (1, e))?;
    let dispatch = match name {
        "generate" => commands::cmd_generate,
        "train" => commands::cmd_train,
        "predict" => commands::cmd_predict,
        "sweep" => commands::cmd_sweep,
        "symreg" => commands::cmd_symreg,
        "verify-theory" => commands::cmd_verify_theory,
        _ => unreachable!("clap restricts the command set"),
    };
    dispatch(&ctx).map_err(|e| {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        (code, e)
    })
}

fn seed_from_env() -> Result<Option<u64>, Error> {
    match std::env::var("HAMLEARN_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("HAMLEARN_SEED must be a u64, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("HAMLEARN_SEED: {e}"))),
    }
}
