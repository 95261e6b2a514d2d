//! Scenario configuration: one TOML file with `[scenario]`, `[network]` and
//! `[protocol]` tables plus `[[agent]]`, `[[task]]`, `[[membership]]` and
//! `[[reservation]]` lists. The graph lives in its own file, referenced
//! relative to the configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{SegmentGraph, Vertex};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("graph {0}: {1}")]
    Graph(PathBuf, String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Agv,
    Traffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    Fields,
    Dyncnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub graph: PathBuf,
    pub ticks: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<AssignmentMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "one")]
    pub latency: u64,
    #[serde(default)]
    pub drop: f64,
}

fn one() -> u64 {
    1
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { latency: 1, drop: 0.0 }
    }
}

/// Protocol constants. Unset values take the defaults of each module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// Switch threshold; defaults to the mean segment length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timer_period: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope_unit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range_unit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_ticks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttl: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refresh_period: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explore_period: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm_budget: Option<usize>,
    /// AGV speed in meters per tick.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    /// Fields mode: distance within which a transport agent assigns an AGV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assign_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Agv,
    Vehicle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: String,
    pub kind: AgentKind,
    pub home: String,
    /// Vehicles: where to drive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<String>,
    /// AGVs: where to rest when idle; defaults to `home`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub park: Option<String>,
    /// Vehicles: first active tick.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub start: u64,
    /// Vehicles: whether intention ants are re-sent every cycle.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub refresh: bool,
    /// Overrides the scenario speed for this agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

fn is_zero(x: &u64) -> bool {
    *x == 0
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub arrival: u64,
    pub pickup: String,
    pub dropoff: String,
    #[serde(default = "regular", rename = "type")]
    pub kind: String,
    #[serde(default = "default_priority")]
    pub priority: u8,
}

fn regular() -> String {
    "regular".into()
}

fn default_priority() -> u8 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MembershipAction {
    Join,
    Leave,
}

/// Take an agent's node down or bring it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipSpec {
    pub tick: u64,
    pub agent: String,
    pub action: MembershipAction,
}

/// Standing bookings on the segment `from` to `to`, never evaporating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservationSpec {
    pub from: String,
    pub to: String,
    pub count: usize,
}

/// Random tasks drawn from the run seed, on top of the listed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub tasks: usize,
    /// Arrival ticks are drawn from `[0, horizon)`.
    pub horizon: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pickups: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropoffs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSection>,
    #[serde(default, rename = "agent")]
    pub agents: Vec<AgentSpec>,
    #[serde(default, rename = "task", skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default, rename = "membership", skip_serializing_if = "Vec::is_empty")]
    pub membership: Vec<MembershipSpec>,
    #[serde(default, rename = "reservation", skip_serializing_if = "Vec::is_empty")]
    pub reservations: Vec<ReservationSpec>,
}

/// A validated configuration with its graph.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ScenarioConfig,
    pub graph: SegmentGraph,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Canonical text form: fixed table order, defaults made explicit
    /// where the module has one.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cross-reference checks against `graph`.
    pub fn validate(&self, graph: &SegmentGraph) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let node = |what: &str, v: &str| -> Result<(), ConfigError> {
            if graph.contains(&Vertex::from(v)) {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{what} references unknown node {v}")))
            }
        };
        let s = &self.scenario;
        if s.ticks == 0 {
            return bad("scenario.ticks must be positive".into());
        }
        match (s.kind, s.assignment) {
            (ScenarioKind::Agv, None) => return bad("agv scenario needs scenario.assignment".into()),
            (ScenarioKind::Traffic, Some(_)) => return bad("scenario.assignment applies to agv scenarios only".into()),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.network.drop) {
            return bad(format!("network.drop {} outside [0, 1]", self.network.drop));
        }
        let p = &self.protocol;
        for (name, v) in [("delta", p.delta), ("scope_unit", p.scope_unit), ("range_unit", p.range_unit), ("rho", p.rho), ("assign_radius", p.assign_radius)] {
            if v.is_some_and(|x| !(x.is_finite() && x >= 0.0)) {
                return bad(format!("protocol.{name} must be a non-negative number"));
            }
        }
        if p.speed.is_some_and(|x| !(x.is_finite() && x > 0.0)) {
            return bad("protocol.speed must be positive".into());
        }
        for (name, v) in [("timer_period", p.timer_period), ("age_ticks", p.age_ticks), ("ttl", p.ttl), ("refresh_period", p.refresh_period), ("explore_period", p.explore_period)] {
            if v == Some(0) {
                return bad(format!("protocol.{name} must be positive"));
            }
        }
        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if a.id.is_empty() || a.id.contains(char::is_whitespace) || a.id.contains('>') {
                return bad(format!("agent id {:?} is not an identifier", a.id));
            }
            if !ids.insert(a.id.as_str()) {
                return bad(format!("duplicate agent {}", a.id));
            }
            node(&format!("agent {}", a.id), &a.home)?;
            let wanted = match s.kind {
                ScenarioKind::Agv => AgentKind::Agv,
                ScenarioKind::Traffic => AgentKind::Vehicle,
            };
            if a.kind != wanted {
                return bad(format!("agent {} has the wrong kind for this scenario", a.id));
            }
            if let Some(p) = &a.park {
                node(&format!("agent {}", a.id), p)?;
            }
            match (&a.destination, a.kind) {
                (Some(d), AgentKind::Vehicle) => node(&format!("agent {}", a.id), d)?,
                (None, AgentKind::Vehicle) => return bad(format!("vehicle {} has no destination", a.id)),
                (Some(_), AgentKind::Agv) => return bad(format!("agv {} cannot have a destination", a.id)),
                (None, AgentKind::Agv) => {}
            }
            if a.speed.is_some_and(|x| !(x.is_finite() && x > 0.0)) {
                return bad(format!("agent {} speed must be positive", a.id));
            }
        }
        let mut tasks = BTreeSet::new();
        for t in &self.tasks {
            if s.kind != ScenarioKind::Agv {
                return bad(format!("task {} in a traffic scenario", t.id));
            }
            if t.id.is_empty() || t.id.contains(char::is_whitespace) || t.id.contains('>') {
                return bad(format!("task id {:?} is not an identifier", t.id));
            }
            if !tasks.insert(t.id.as_str()) {
                return bad(format!("duplicate task {}", t.id));
            }
            node(&format!("task {}", t.id), &t.pickup)?;
            node(&format!("task {}", t.id), &t.dropoff)?;
            if !(1..=5).contains(&t.priority) {
                return bad(format!("task {} priority {} outside 1..=5", t.id, t.priority));
            }
            if !matches!(t.kind.as_str(), "regular" | "urgent") {
                return bad(format!("task {} type must be regular or urgent", t.id));
            }
        }
        if let Some(g) = &self.generator {
            if s.kind != ScenarioKind::Agv {
                return bad("generator applies to agv scenarios only".into());
            }
            if g.horizon == 0 {
                return bad("generator.horizon must be positive".into());
            }
            for v in g.pickups.iter().chain(&g.dropoffs) {
                node("generator", v)?;
            }
        }
        for m in &self.membership {
            if !ids.contains(m.agent.as_str()) {
                return bad(format!("membership at tick {} names unknown agent {}", m.tick, m.agent));
            }
        }
        for r in &self.reservations {
            if s.kind != ScenarioKind::Traffic {
                return bad("reservations apply to traffic scenarios only".into());
            }
            node("reservation", &r.from)?;
            node("reservation", &r.to)?;
            if graph.edge_between(&Vertex::from(r.from.as_str()), &Vertex::from(r.to.as_str())).is_none() {
                return bad(format!("reservation names no segment {} to {}", r.from, r.to));
            }
        }
        Ok(())
    }
}

/// Read, parse and validate a configuration and its graph.
pub fn load_config(path: &Path) -> Result<Loaded, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    let config = ScenarioConfig::parse(&text)?;
    let graph_path = path.parent().unwrap_or(Path::new(".")).join(&config.scenario.graph);
    let graph_text = fs::read_to_string(&graph_path).map_err(|e| ConfigError::Io(graph_path.clone(), e))?;
    let graph = SegmentGraph::parse(&graph_text).map_err(|e| ConfigError::Graph(graph_path, e.to_string()))?;
    config.validate(&graph)?;
    Ok(Loaded { config, graph })
}
