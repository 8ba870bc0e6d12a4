use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stlcbf_cli::{cmd_monitor, cmd_plot, cmd_simulate, cmd_synth, MonitorSource, PlotKind};

#[derive(Parser)]
#[command(
    name = "stlcbf",
    about = "Compile temporal-logic tasks into time-varying control barrier functions, \
             synthesize their parameters, simulate the decentralized controllers, and \
             monitor the logged runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize barrier parameters for every group of a scenario.
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        /// Parameter JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Verify a fixed robustness level instead of maximizing it.
        #[arg(long, value_name = "R")]
        feasibility: Option<f64>,
    },
    /// Simulate a scenario under previously synthesized parameters.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Trajectory CSV output path; a summary JSON is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Disturbance seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate robust satisfaction on a logged trajectory.
    Monitor {
        #[arg(long)]
        traj: PathBuf,
        /// Scenario file providing the group formulas.
        #[arg(long, conflicts_with = "formula")]
        scenario: Option<PathBuf>,
        /// Bare formula over the full stacked state in file order.
        #[arg(long)]
        formula: Option<String>,
        /// Evaluation time.
        #[arg(long, default_value_t = 0.0)]
        at: f64,
    },
    /// Render a static SVG from a logged trajectory.
    Plot {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotArg {
    Barrier,
    Paths,
    Inputs,
}

impl From<PlotArg> for PlotKind {
    fn from(value: PlotArg) -> Self {
        match value {
            PlotArg::Barrier => PlotKind::Barrier,
            PlotArg::Paths => PlotKind::Paths,
            PlotArg::Inputs => PlotKind::Inputs,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Synth {
            scenario,
            out,
            feasibility,
        } => Ok(cmd_synth(&scenario, &out, feasibility)?.exit_code),
        Command::Simulate {
            scenario,
            params,
            out,
            seed,
        } => Ok(cmd_simulate(&scenario, &params, &out, seed)?.exit_code),
        Command::Monitor {
            traj,
            scenario,
            formula,
            at,
        } => {
            let source = match (scenario, formula) {
                (Some(path), None) => MonitorSource::Scenario(path),
                (None, Some(text)) => MonitorSource::Formula(text),
                _ => anyhow::bail!("monitor needs exactly one of --scenario or --formula"),
            };
            Ok(cmd_monitor(&traj, source, at)?.exit_code)
        }
        Command::Plot { traj, out, kind } => cmd_plot(&traj, &out, kind.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
