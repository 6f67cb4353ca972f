//! Command-line front end for `odekernel`: simulate data, fit, select λ by
//! AIC and run replicated benchmarks, with TOML configuration and CSV files.
//! File layouts are described in `FORMATS.md` at the repository root.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{benchmark, fit, select_lambda, simulate};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};

/// The subcommands, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    SelectLambda,
    Benchmark,
}

/// Loads the config, applies overrides and runs `command`.
pub fn run(command: Command, config_path: &std::path::Path, overrides: &Overrides) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    config.apply(overrides);
    match command {
        Command::Simulate => simulate(&config).map(|_| ()),
        Command::Fit => fit(&config).map(|_| ()),
        Command::SelectLambda => select_lambda(&config).map(|_| ()),
        Command::Benchmark => benchmark(&config).map(|_| ()),
    }
}
