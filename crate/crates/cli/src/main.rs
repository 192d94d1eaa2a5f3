//! Command-line driver for Bayesian federated inference.
//!
//! Three verbs: `fit` runs local MAP estimation and writes the message a
//! center shares, `combine` aggregates messages on the central side, and
//! `simulate` runs the replicated benchmark. Nothing here talks to a
//! network; messages are plain files that users move between machines.

mod combine_cmd;
mod csv_input;
mod fit_cmd;
mod simulate_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "bfi",
    version,
    about = "Bayesian federated inference for generalized linear models: \
             fit locally once, combine the inference results centrally"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a GLM on local data under a Gaussian prior and write the
    /// shareable fit message.
    Fit(fit_cmd::FitArgs),
    /// Combine fit messages into the aggregated estimate with credible
    /// intervals, baselines and diagnostics.
    Combine(combine_cmd::CombineArgs),
    /// Run the replicated simulation benchmark and write MSE metrics.
    Simulate(simulate_cmd::SimulateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(args) => fit_cmd::run(args),
        Command::Combine(args) => combine_cmd::run(args),
        Command::Simulate(args) => simulate_cmd::run(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
