//! Scenario registry and command runner behind the `ehresmann-lab` binary.

pub mod config;
pub mod error;
pub mod run;
pub mod scenarios;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use run::{execute, run, Artifact, CommandKind};
