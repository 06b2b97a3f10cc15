//! `snctl` — scenario runner for the stochastic leader/follower control lab.
//!
//! Exit codes: 0 when every contract of the requested command held, 1 when a
//! contract failed or a solver gave up, 2 for usage and configuration errors.

use clap::{Parser, Subcommand};
use sn_control::error::Error;
use sn_control::experiments::{run, Command as RunCommand};
use sn_control::scenario::Scenario;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "snctl",
    version,
    about = "Hierarchical control experiments for forward and backward stochastic heat equations"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for summary.json and the CSV artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the weight-family lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the goal tolerance epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Solve the follower equilibrium for the scenario's leader data.
    NashSolve(CommonArgs),
    /// Drive the state to zero within epsilon and certify the cost bound.
    NullControl(CommonArgs),
    /// Reach the scenario's goal state within epsilon.
    ApproxControl(CommonArgs),
    /// Attempt exact goal matching (diagnostic; severely ill-conditioned).
    ExactControl(CommonArgs),
    /// Randomized certification of the duality identity.
    DualityCheck(CommonArgs),
    /// Estimate the observability constant by Rayleigh ascent.
    ObservabilityEstimate(CommonArgs),
    /// Evaluate the weight family and check its pinned properties.
    CarlemanWeights(CommonArgs),
    /// Scan the follower operator's coercivity over a penalty grid.
    CoercivityScan(CommonArgs),
}

impl CliCommand {
    fn split(self) -> (RunCommand, CommonArgs) {
        match self {
            CliCommand::NashSolve(a) => (RunCommand::NashSolve, a),
            CliCommand::NullControl(a) => (RunCommand::NullControl, a),
            CliCommand::ApproxControl(a) => (RunCommand::ApproxControl, a),
            CliCommand::ExactControl(a) => (RunCommand::ExactControl, a),
            CliCommand::DualityCheck(a) => (RunCommand::DualityCheck, a),
            CliCommand::ObservabilityEstimate(a) => (RunCommand::ObservabilityEstimate, a),
            CliCommand::CarlemanWeights(a) => (RunCommand::CarlemanWeights, a),
            CliCommand::CoercivityScan(a) => (RunCommand::CoercivityScan, a),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = cli.command.split();

    let mut scenario = match Scenario::load(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        scenario.weights.lambda = lambda;
    }
    if let Some(epsilon) = args.epsilon {
        scenario.goal.epsilon = epsilon;
    }
    if let Err(e) = scenario.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    match run(command, &scenario, args.out.as_deref()) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{text}");
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Scenario(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
