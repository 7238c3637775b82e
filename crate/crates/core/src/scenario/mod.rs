//! Scenario files, expected-step checking and run reports.

pub mod builtin;
mod parse;
mod report;
mod steps;

pub use parse::{parse_scenario, ConfigSource, EmbeddedSource, FsSource, ParseError, Scenario, DEFAULT_REBOOT_DELAY};
pub use report::{vm_events, Recomputed, RunReport};
pub use steps::{check_expected_steps, Divergence, Verdict};

use crate::cluster::{Cluster, ClusterError, RunOutcome};

/// Parses a builtin scenario by name.
pub fn load_builtin(name: &str) -> Option<Result<Scenario, ParseError>> {
    builtin::scenario(name).map(|t| parse_scenario(t, &EmbeddedSource))
}

pub fn run_scenario(sc: &Scenario) -> Result<(RunReport, RunOutcome), ClusterError> {
    let out = Cluster::new(sc.cluster_config())?.run()?;
    Ok((RunReport::build(sc, &out), out))
}
