//! `nafkit`: fit, sample and inspect autoregressive flows.

mod certify;
mod config;
mod evaluate;
mod exit;
mod fit;
mod io;
mod selftest;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use exit::UsageError;

/// Environment variable that fixes the size of the worker pool.
const THREADS_VAR: &str = "NAFKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nafkit", version, about = "Neural autoregressive flows: density fitting, energy fitting and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a flow to samples by maximum likelihood.
    FitDensity(fit::FitArgs),
    /// Fit a flow to an unnormalized target by reverse KL.
    FitEnergy(fit::FitArgs),
    /// Draw samples from a checkpoint.
    Sample(evaluate::SampleArgs),
    /// Append model log-densities to a CSV of points.
    Logpdf(evaluate::LogpdfArgs),
    /// Evaluate a model or target log-density on a 2-D grid.
    GridExport(evaluate::GridArgs),
    /// Build and certify the step and sigmoid approximations of a CDF.
    CertifyUniversal(certify::CertifyArgs),
    /// Run the built-in property checks.
    Selftest(selftest::SelftestArgs),
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => bail!(UsageError(format!("{THREADS_VAR}={raw:?} is not a positive integer"))),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting the worker pool")
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::FitDensity(a) => fit::fit_density(a),
        Command::FitEnergy(a) => fit::fit_energy(a),
        Command::Sample(a) => evaluate::sample(a),
        Command::Logpdf(a) => evaluate::logpdf(a),
        Command::GridExport(a) => evaluate::grid_export(a),
        Command::CertifyUniversal(a) => certify::certify(a),
        Command::Selftest(a) => selftest::selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
