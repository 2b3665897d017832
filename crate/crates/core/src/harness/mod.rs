//! Deterministic simulation of the whole stack: scenario files, the run
//! loop, traces and reports.

pub mod report;
pub mod scenario;
pub mod sim;
pub mod sweep;
pub mod trace;

pub use report::RunReport;
pub use scenario::{BehaviorProfile, Scenario, ScenarioError};
pub use sim::{run, RunOutput};
pub use sweep::{fault_game, sweep, sweep_model, RoundStats, Topology};
pub use trace::{diff_traces, Trace, TraceDiff, TraceRecord};

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("honest-baseline", include_str!("../../scenarios/honest-baseline.toml")),
    ("faulty-server", include_str!("../../scenarios/faulty-server.toml")),
    ("nonpaying-client", include_str!("../../scenarios/nonpaying-client.toml")),
    ("false-challenger", include_str!("../../scenarios/false-challenger.toml")),
    ("double-sign-fraud", include_str!("../../scenarios/double-sign-fraud.toml")),
    ("escrow-exhaustion", include_str!("../../scenarios/escrow-exhaustion.toml")),
    ("ownership-dispute", include_str!("../../scenarios/ownership-dispute.toml")),
    ("equivocating-server", include_str!("../../scenarios/equivocating-server.toml")),
    ("da-before-payment", include_str!("../../scenarios/da-before-payment.toml")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Loads a bundled scenario by name.
pub fn bundled(name: &str) -> Option<Result<Scenario, ScenarioError>> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::parse(text))
}
