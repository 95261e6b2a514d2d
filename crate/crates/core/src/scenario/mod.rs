//! Scenario runtime, configuration and the bundled scenario families.

pub mod agv;
pub mod config;
pub mod metrics;
pub mod runtime;
pub mod traffic;

use crate::kernel::KernelError;

use agv::AgvScenario;
use config::{Loaded, ScenarioKind};
use metrics::{mean, RunMetrics};
use traffic::TrafficScenario;

/// What a run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub trace: String,
    /// Invariant breaches seen by the harness, one line each.
    pub violations: Vec<String>,
}

/// Build and run the scenario of a validated configuration.
pub fn run_scenario(loaded: &Loaded, seed: Option<u64>, steps: Option<u64>) -> Result<RunOutcome, KernelError> {
    let cfg = &loaded.config;
    let seed = seed.unwrap_or(cfg.scenario.seed);
    let ticks = steps.unwrap_or(cfg.scenario.ticks);
    match cfg.scenario.kind {
        ScenarioKind::Agv => {
            let mut s = AgvScenario::from_config(cfg, loaded.graph.clone(), seed)?;
            s.run(ticks);
            Ok(agv_outcome(&s))
        }
        ScenarioKind::Traffic => {
            let mut s = TrafficScenario::from_config(cfg, loaded.graph.clone(), seed)?;
            s.run(ticks);
            Ok(traffic_outcome(&s))
        }
    }
}

pub fn agv_outcome(s: &AgvScenario) -> RunOutcome {
    let transports: Vec<_> = s.transports().collect();
    let latencies: Vec<u64> = transports
        .iter()
        .filter_map(|t| t.assigned.as_ref().map(|(_, at)| at.0.saturating_sub(t.spec().arrival)))
        .collect();
    let kernel = s.world.kernel();
    let metrics = RunMetrics {
        tasks_completed: transports.iter().filter(|t| t.completed_at.is_some()).count() as u64,
        mean_assignment_latency_ticks: mean(&latencies),
        switch_count: transports.iter().filter_map(|t| t.initiator()).map(|i| i.switches).sum(),
        lock_conflict_wait_ticks: s.agvs().map(|a| a.stats.lock_wait_ticks).sum(),
        booking_reject_count: 0,
        trace_hash: kernel.trace_hash(),
    };
    let mut violations = s.violations.clone();
    for (t, a, b) in s.world.lock_violations() {
        violations.push(format!("tick {t}: projections {a} and {b} share a locked segment"));
    }
    RunOutcome { metrics, trace: kernel.trace().to_string(), violations }
}

pub fn traffic_outcome(s: &TrafficScenario) -> RunOutcome {
    let kernel = s.world.kernel();
    let metrics = RunMetrics {
        tasks_completed: s.vehicles().filter(|v| v.stats.arrived_at.is_some()).count() as u64,
        mean_assignment_latency_ticks: 0.0,
        switch_count: s.vehicles().map(|v| v.core().switches).sum(),
        lock_conflict_wait_ticks: 0,
        booking_reject_count: s.vehicles().map(|v| v.booker().rejects() as u64).sum(),
        trace_hash: kernel.trace_hash(),
    };
    RunOutcome { metrics, trace: kernel.trace().to_string(), violations: Vec::new() }
}
