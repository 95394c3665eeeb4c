use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rbsde_cli::{run, Command, OutputFormat, RunConfig, RunOptions, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "rbsde", version, about = "Reflecting-diffusion BSDE solver and oracles")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate a path bundle and its quadratic-variation report.
    Simulate(Common),
    /// Solve the BSDE `dY = -g dt + Z dM`, `Y_T = phi(X_T)`.
    SolveBsde(Common),
    /// Stochastic solution `u(t, mu)` of `u_t = L u - f(u)`, `u(0) = phi`.
    SolvePdeStochastic(Common),
    /// Finite-difference solution of the same problem.
    SolvePdeFd(Common),
    /// Resolvent identities and potential checks.
    VerifyResolvent(Common),
    /// Stochastic solution against the finite-difference oracle.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Tables as separate CSV files or inside report.json.
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::SolveBsde(c) => (Command::SolveBsde, c),
        Sub::SolvePdeStochastic(c) => (Command::SolvePdeStochastic, c),
        Sub::SolvePdeFd(c) => (Command::SolvePdeFd, c),
        Sub::VerifyResolvent(c) => (Command::VerifyResolvent, c),
        Sub::Compare(c) => (Command::Compare, c),
    };
    let config = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("rbsde: {e}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    let outcome = run(RunOptions { command, config, seed: common.seed, out: common.out, threads: common.threads, format: common.format });
    if let Some(msg) = &outcome.message {
        eprintln!("rbsde: {msg}");
    }
    if let Some(dir) = &outcome.out_dir {
        log::info!("outputs in {}", dir.display());
    }
    ExitCode::from(outcome.exit_code as u8)
}
