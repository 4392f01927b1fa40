//! `mfgc`: solve, verify, simulate and sweep ergodic MFGs of controls from a TOML configuration.
//!
//! Exit codes: 0 success, 1 configuration error, 2 solver failure, 3 failed verification.

mod config;
mod output;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use run::{CliError, Flags};

#[derive(Debug, Parser)]
#[command(name = "mfgc", version, about = "Ergodic state-constrained mean field games of controls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the equilibrium and write the solution bundle.
    Solve(Common),
    /// Certify the model and check boundary asymptotics and residuals.
    Verify(Common),
    /// Simulate the optimally controlled diffusion and compare with the PDE.
    Simulate(Common),
    /// Solve across a sweep axis concurrently.
    Sweep(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides MFGC_OUT_DIR and the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (Command::Solve(c) | Command::Verify(c) | Command::Simulate(c) | Command::Sweep(c)) = &cli.command;
    let flags = Flags { out: c.out.clone(), workers: c.workers, verbose: c.verbose };
    let result = RunConfig::load(&c.config).map_err(CliError::from).and_then(|cfg| match &cli.command {
        Command::Solve(_) => run::cmd_solve(&cfg, &flags),
        Command::Verify(_) => run::cmd_verify(&cfg, &flags),
        Command::Simulate(_) => run::cmd_simulate(&cfg, &flags),
        Command::Sweep(_) => run::cmd_sweep(&cfg, &flags),
    });
    match result {
        Ok(dir) => {
            if flags.verbose {
                eprintln!("outputs written to {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mfgc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
