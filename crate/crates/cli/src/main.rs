use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odekernel_cli::{run, Command, Overrides};

#[derive(Parser)]
#[command(
    name = "odekernel",
    version,
    about = "ODE parameter estimation with an RKHS-penalized likelihood"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a noisy dataset and its noiseless truth
    Simulate(Common),
    /// Fit a model to a dataset
    Fit(Common),
    /// Fit over a λ grid and select the minimum AIC
    SelectLambda(Common),
    /// Replicated comparison of the penalized fit and the solver-based baseline
    Benchmark(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `lambda`
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides `out`
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = std::env::var("ODEKERNEL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Fit(a) => (Command::Fit, a),
        Cmd::SelectLambda(a) => (Command::SelectLambda, a),
        Cmd::Benchmark(a) => (Command::Benchmark, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        lambda: args.lambda,
        out: args.out,
    };
    match run(command, &args.config, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
