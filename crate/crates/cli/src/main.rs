use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehresmann_lab::{run, CommandKind, RunConfig};

/// Numerical experiments with connections on fiber bundles.
#[derive(Parser)]
#[command(name = "ehresmann-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Horizontal lift of a straight base curve (CSV).
    Lift(RunConfig),
    /// Parallel transport of several fiber points (JSON).
    Transport(RunConfig),
    /// Tube construction of a complete connection (JSON).
    Construct(RunConfig),
    /// Randomized completeness probe (JSON).
    Probe(RunConfig),
    /// Unit-speed geodesic (CSV).
    Geodesic(RunConfig),
    /// Length of a curve (JSON).
    Length(RunConfig),
    /// Thick-tube complete fibered metric plus a geodesic probe (JSON).
    MetricConstruct(RunConfig),
    /// Horizontal and disconnecting checks for a section family (JSON).
    CheckLemma(RunConfig),
    /// Exponential trivialization around a base point (JSON).
    ExpTriv(RunConfig),
    /// The scenario registry (JSON).
    Scenarios(RunConfig),
}

fn main() -> ExitCode {
    let (kind, cfg) = match Cli::parse().command {
        Command::Lift(c) => (CommandKind::Lift, c),
        Command::Transport(c) => (CommandKind::Transport, c),
        Command::Construct(c) => (CommandKind::Construct, c),
        Command::Probe(c) => (CommandKind::Probe, c),
        Command::Geodesic(c) => (CommandKind::Geodesic, c),
        Command::Length(c) => (CommandKind::Length, c),
        Command::MetricConstruct(c) => (CommandKind::MetricConstruct, c),
        Command::CheckLemma(c) => (CommandKind::CheckLemma, c),
        Command::ExpTriv(c) => (CommandKind::ExpTriv, c),
        Command::Scenarios(c) => (CommandKind::Scenarios, c),
    };
    match run(kind, cfg) {
        Ok((artifact, written)) => {
            if written.is_none() {
                let mut out = std::io::stdout().lock();
                if out.write_all(artifact.text().as_bytes()).is_err() {
                    return ExitCode::from(2);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
