//! Traffic routing: an infrastructure agent on every vertex, vehicle agents
//! that explore routes and book their intention with delegate ants.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;
use std::sync::Arc;

use crate::agent::{Agent, PerceptionRequest};
use crate::ants::{
    self, ia_id, plan_booking, AntConfig, BookingClient, ExploreAnt, ExploreClient, ExploreRelay, Infrastructure,
    IntentionRelay, Revision, SharedInfrastructure, VehicleCore,
};
use crate::codec::ContentLanguage;
use crate::env::{ExternalEnvironment, Focus, Observation, Operation, SyncRule};
use crate::freeflow::{refine_action, Refinement};
use crate::graph::{GraphPath, SegmentGraph, Vertex};
use crate::kernel::{KernelError, NetworkConfig, NodeId, Tick};
use crate::perception::{Description, Representation};
use crate::value::{Items, Value};

use super::config::ScenarioConfig;
use super::runtime::{communicate, Ctx, Unit, World};

pub const IA_KIND: &str = "infrastructure";
pub const VEHICLE_KIND: &str = "vehicle";

pub fn ia_node(v: &Vertex) -> NodeId {
    NodeId::new(format!("v-{v}"))
}

pub fn vehicle_node(id: &str) -> NodeId {
    NodeId::new(format!("{id}-node"))
}

/// Car and driver: follows the instructed route at a fixed speed.
#[derive(Debug, Clone)]
pub struct DriverStub {
    agent: String,
    graph: Arc<SegmentGraph>,
    speed: f64,
    position: Vertex,
    /// Segment being driven: target vertex, length, meters done.
    leg: Option<(Vertex, f64, f64)>,
    route: Vec<Vertex>,
    dirty: bool,
}

impl DriverStub {
    pub fn new(agent: &str, graph: Arc<SegmentGraph>, speed: f64, position: Vertex) -> Self {
        DriverStub { agent: agent.to_string(), graph, speed, position, leg: None, route: Vec::new(), dirty: true }
    }

    fn items(&self) -> Items {
        let next = self.leg.as_ref().map_or(&self.position, |l| &l.0).clone();
        [("position", Value::Node(self.position.clone())), ("next", Value::Node(next))].into_iter().collect()
    }

    /// Start the next segment of the route, if any.
    fn depart(&mut self) {
        let Some(i) = self.route.iter().position(|v| *v == self.position) else { return };
        let Some(to) = self.route.get(i + 1).cloned() else { return };
        let Some(e) = self.graph.edge_between(&self.position, &to).and_then(|e| self.graph.edge(e)) else { return };
        self.leg = Some((to, e.length, 0.0));
        self.dirty = true;
    }
}

impl ExternalEnvironment for DriverStub {
    fn observe(&mut self, _: &Observation) -> Result<Representation, String> {
        Ok(Representation(self.items()))
    }

    fn operate(&mut self, op: &Operation, _: Tick) {
        if op.agent_id != self.agent || op.name != "instructDriver" {
            return;
        }
        if let Some(p) = op.params.get("path").and_then(Value::as_path) {
            self.route = p.nodes.clone();
            if self.leg.is_none() {
                self.depart();
            }
        }
    }

    fn poll(&mut self, _: Tick) -> Vec<(String, Items)> {
        if let Some((to, len, done)) = self.leg.as_mut() {
            *done += self.speed;
            if *done >= *len {
                self.position = to.clone();
                self.leg = None;
                self.dirty = true;
                self.depart();
            }
        }
        if !self.dirty {
            return Vec::new();
        }
        self.dirty = false;
        vec![(self.agent.clone(), self.items())]
    }

    fn snapshot(&self) -> Items {
        self.items()
    }
}

/// Infrastructure agent of one vertex.
pub struct IaAgent {
    agent: Agent,
    ia: SharedInfrastructure,
    explore: ExploreRelay,
    intention: IntentionRelay,
}

impl IaAgent {
    pub fn new(vertex: Vertex, graph: Arc<SegmentGraph>, cfg: AntConfig, ordinal: u64) -> Self {
        let ia = Rc::new(RefCell::new(Infrastructure::new(vertex.clone(), graph, cfg)));
        IaAgent {
            agent: Agent::new(ia_id(&vertex), IA_KIND, ordinal),
            explore: ExploreRelay::new(ia.clone()),
            intention: IntentionRelay::new(ia.clone()),
            ia,
        }
    }

    pub fn infrastructure(&self) -> std::cell::Ref<'_, Infrastructure> {
        self.ia.borrow()
    }

    fn run_cycle(&mut self, ctx: &mut Ctx) {
        for (edge, vehicle) in self.ia.borrow_mut().evaporate(ctx.now) {
            self.agent.event("evaporated", format!("{edge} {vehicle}"));
        }
        let IaAgent { agent, explore, intention, .. } = self;
        communicate(agent, &mut [explore, intention], ctx);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VehicleStats {
    pub explorations: u64,
    pub no_path_events: u64,
    pub adopted: Option<GraphPath>,
    pub arrived_at: Option<Tick>,
}

pub struct VehicleAgent {
    agent: Agent,
    graph: Arc<SegmentGraph>,
    core: VehicleCore,
    explorer: ExploreClient,
    booker: BookingClient,
    start: u64,
    pub stats: VehicleStats,
}

impl VehicleAgent {
    pub fn new(id: &str, destination: Vertex, start: u64, cfg: AntConfig, graph: Arc<SegmentGraph>, ordinal: u64) -> Self {
        let mut agent = Agent::new(id, VEHICLE_KIND, ordinal);
        for item in ["position", "next"] {
            agent.add_description(Description::passthrough(item, &[item]));
        }
        VehicleAgent {
            agent,
            graph,
            core: VehicleCore::new(destination, cfg),
            explorer: ExploreClient::new(),
            booker: BookingClient::new(),
            start,
            stats: VehicleStats::default(),
        }
    }

    pub fn with_refresh(mut self, refresh: bool) -> Self {
        self.core.refresh = refresh;
        self
    }

    pub fn id(&self) -> &str {
        self.agent.id()
    }

    pub fn core(&self) -> &VehicleCore {
        &self.core
    }

    pub fn explorer(&self) -> &ExploreClient {
        &self.explorer
    }

    pub fn booker(&self) -> &BookingClient {
        &self.booker
    }

    pub fn position(&self) -> Option<&Vertex> {
        self.agent.knowledge().get("position").and_then(Value::as_node)
    }

    fn explore(&mut self, ctx: &mut Ctx, origin: &Vertex) {
        let Ok(d) = self.graph.distance(origin, &self.core.destination) else { return };
        if !d.is_finite() {
            self.agent.event("noFeasiblePath", format!("{origin} cannot reach {}", self.core.destination));
            return;
        }
        let ant = ExploreAnt {
            origin: origin.clone(),
            destination: self.core.destination.clone(),
            max_dist: d * self.core.cfg.explore_slack,
            budget: self.core.cfg.hop_budget,
            vehicle: self.agent.id().to_string(),
            path: GraphPath::new(vec![origin.clone()]),
            cost: 0.0,
        };
        let conv = self.agent.fresh_id();
        self.explorer.launch(conv, ant, ctx.now);
        self.stats.explorations += 1;
    }

    /// Revise, book and steer, using the newest exploration round.
    fn decide(&mut self, ctx: &mut Ctx, position: &Vertex, origin: &Vertex) {
        self.core.advance(position);
        let ahead: Vec<Vertex> = self.core.intention.as_ref().map_or_else(|| vec![position.clone()], |p| p.nodes.clone());
        let latest = self.explorer.rounds().iter().next_back().map(|(c, r)| (*c, r.clone()));
        let revision = match &latest {
            Some((conv, round)) => {
                self.core.consumed_round = Some(*conv);
                self.core.revise(&ahead, origin, &round.results, &self.graph)
            }
            None => Revision::NoAlternatives,
        };
        let changed = match &revision {
            Revision::NoAlternatives => {
                self.stats.no_path_events += 1;
                self.agent.event("noFeasiblePath", format!("from {origin}"));
                false
            }
            Revision::Kept => false,
            Revision::Adopted(p) => {
                self.agent.event("intention", p.to_string());
                self.stats.adopted = Some(p.clone());
                true
            }
            Revision::Switched { to, .. } => {
                self.agent.event("switch", to.to_string());
                true
            }
        };
        let Some(intention) = self.core.intention.clone() else { return };
        if changed || self.core.refresh || self.core.last_booking.is_none() {
            let id = self.agent.fresh_id();
            if let Some(b) = plan_booking(id, self.agent.id(), &intention, &self.graph, ctx.now, self.core.cfg.speed) {
                self.booker.send(id, b);
                self.core.bookings_sent += 1;
                self.core.last_booking = Some(ctx.now);
            }
        }
        let mut k = self.agent.knowledge().clone();
        k.insert("currentIntention", intention);
        if let Refinement::Act(a) = refine_action("instructDriver", self.agent.id(), &k, &self.graph) {
            if let Err(e) = ctx.ve.act(&a) {
                self.agent.event("actionFailed", e.to_string());
            }
        }
    }

    fn run_cycle(&mut self, ctx: &mut Ctx) {
        let now = ctx.now.0;
        if now < self.start || self.stats.arrived_at.is_some() {
            return;
        }
        let n = self.agent.perceive(&PerceptionRequest::new("car", Focus::new("resource")), ctx.ve);
        if let Err(e) = n.outcome {
            self.agent.event("perceptionFailed", e);
        }
        let k = self.agent.knowledge();
        let (Some(position), Some(next)) =
            (k.get("position").and_then(Value::as_node).cloned(), k.get("next").and_then(Value::as_node).cloned())
        else {
            return;
        };
        if position == self.core.destination {
            self.stats.arrived_at = Some(ctx.now);
            self.agent.event("arrived", position.to_string());
            return;
        }
        let (explore_period, lead, period) = (self.core.cfg.explore_period, self.core.cfg.explore_lead, self.core.cfg.refresh_period);
        let since = now - self.start;
        if since % explore_period == 0 {
            self.explore(ctx, &next);
        }
        if since >= lead && (since - lead) % period == 0 {
            self.decide(ctx, &position, &next);
        }
        let VehicleAgent { agent, explorer, booker, .. } = self;
        communicate(agent, &mut [explorer, booker], ctx);
    }
}

/// Sends a single exploration ant and collects what comes back.
pub struct Probe {
    agent: Agent,
    explorer: ExploreClient,
    ant: Option<ExploreAnt>,
}

impl Probe {
    pub fn new(id: &str, ant: ExploreAnt, ordinal: u64) -> Self {
        Probe { agent: Agent::new(id, VEHICLE_KIND, ordinal), explorer: ExploreClient::new(), ant: Some(ant) }
    }

    pub fn found(&self) -> BTreeSet<GraphPath> {
        self.explorer.rounds().values().flat_map(|r| r.results.iter().map(|(p, _)| p.clone())).collect()
    }

    fn run_cycle(&mut self, ctx: &mut Ctx) {
        if let Some(ant) = self.ant.take() {
            let conv = self.agent.fresh_id();
            self.explorer.launch(conv, ant, ctx.now);
        }
        communicate(&mut self.agent, &mut [&mut self.explorer], ctx);
    }
}

pub enum TrafficUnit {
    Ia(Box<IaAgent>),
    Vehicle(Box<VehicleAgent>),
    Probe(Box<Probe>),
}

impl Unit for TrafficUnit {
    fn agent(&self) -> &Agent {
        match self {
            TrafficUnit::Ia(a) => &a.agent,
            TrafficUnit::Vehicle(v) => &v.agent,
            TrafficUnit::Probe(p) => &p.agent,
        }
    }

    fn agent_mut(&mut self) -> &mut Agent {
        match self {
            TrafficUnit::Ia(a) => &mut a.agent,
            TrafficUnit::Vehicle(v) => &mut v.agent,
            TrafficUnit::Probe(p) => &mut p.agent,
        }
    }

    fn cycle(&mut self, ctx: &mut Ctx) {
        match self {
            TrafficUnit::Ia(a) => a.run_cycle(ctx),
            TrafficUnit::Vehicle(v) => v.run_cycle(ctx),
            TrafficUnit::Probe(p) => p.run_cycle(ctx),
        }
    }
}

impl TrafficUnit {
    pub fn as_ia(&self) -> Option<&IaAgent> {
        match self {
            TrafficUnit::Ia(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_vehicle(&self) -> Option<&VehicleAgent> {
        match self {
            TrafficUnit::Vehicle(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_probe(&self) -> Option<&Probe> {
        match self {
            TrafficUnit::Probe(p) => Some(p),
            _ => None,
        }
    }
}

pub fn ant_config(cfg: &ScenarioConfig) -> AntConfig {
    let p = &cfg.protocol;
    let d = AntConfig::default();
    AntConfig {
        refresh_period: p.refresh_period.unwrap_or(d.refresh_period),
        explore_period: p.explore_period.unwrap_or(d.explore_period),
        ttl: p.ttl.unwrap_or(d.ttl),
        revision: p.rho.unwrap_or(d.revision),
        capacity: p.capacity.unwrap_or(d.capacity),
        speed: p.speed.unwrap_or(d.speed),
        ..d
    }
}

pub struct TrafficScenario {
    pub world: World<TrafficUnit>,
    pub cfg: AntConfig,
}

impl TrafficScenario {
    /// Infrastructure agents on every vertex, no vehicles yet.
    pub fn new(network: NetworkConfig, graph: Arc<SegmentGraph>, cfg: AntConfig, comm_budget: usize) -> Result<Self, KernelError> {
        let mut lang = ContentLanguage::new();
        ants::register_schema(&mut lang);
        let mut world = World::new(network, graph.clone(), Arc::new(lang), comm_budget)?;
        for v in graph.nodes() {
            let node = ia_node(v);
            let ve = world.environment(&node);
            let o = world.ordinal();
            world.add_node(node, ve, vec![TrafficUnit::Ia(Box::new(IaAgent::new(v.clone(), graph.clone(), cfg.clone(), o)))])?;
        }
        Ok(TrafficScenario { world, cfg })
    }

    pub fn from_config(cfg: &ScenarioConfig, graph: SegmentGraph, seed: u64) -> Result<Self, KernelError> {
        let ants = ant_config(cfg);
        let network = NetworkConfig { latency_ticks: cfg.network.latency, drop_probability: cfg.network.drop, seed };
        let graph = Arc::new(graph);
        let mut s = TrafficScenario::new(network, graph, ants, cfg.protocol.comm_budget.unwrap_or(64))?;
        for (k, r) in cfg.reservations.iter().enumerate() {
            for i in 0..r.count {
                s.reserve_static(&Vertex::from(r.from.as_str()), &Vertex::from(r.to.as_str()), &format!("static-{k}-{i}"));
            }
        }
        for a in &cfg.agents {
            let Some(dest) = &a.destination else { continue };
            let mut agent_cfg = s.cfg.clone();
            if let Some(speed) = a.speed {
                agent_cfg.speed = speed;
            }
            s.add_vehicle_with(&a.id, Vertex::from(a.home.as_str()), Vertex::from(dest.as_str()), a.start, a.refresh, agent_cfg)?;
        }
        Ok(s)
    }

    /// Permanent reservation of the segment `from`-`to` for `holder`.
    pub fn reserve_static(&mut self, from: &Vertex, to: &Vertex, holder: &str) {
        let Some(edge) = self.world.graph().edge_between(from, to) else { return };
        if let Some(h) = self.world.host_mut(&ia_node(from)) {
            for u in &mut h.units {
                if let TrafficUnit::Ia(a) = u {
                    a.ia.borrow_mut().reserve_fixed(edge, holder, (Tick(0), Tick(u64::MAX)));
                }
            }
        }
    }

    pub fn add_vehicle(&mut self, id: &str, home: Vertex, destination: Vertex, start: u64, refresh: bool) -> Result<(), KernelError> {
        let cfg = self.cfg.clone();
        self.add_vehicle_with(id, home, destination, start, refresh, cfg)
    }

    fn add_vehicle_with(
        &mut self,
        id: &str,
        home: Vertex,
        destination: Vertex,
        start: u64,
        refresh: bool,
        cfg: AntConfig,
    ) -> Result<(), KernelError> {
        let node = vehicle_node(id);
        let mut ve = self.world.environment(&node);
        ve.add_sync_rule(SyncRule::ExternalMirror);
        let graph = self.world.graph().clone();
        ve.set_external(Box::new(DriverStub::new(id, graph.clone(), cfg.speed, home)));
        let o = self.world.ordinal();
        let v = VehicleAgent::new(id, destination, start, cfg, graph, o).with_refresh(refresh);
        self.world.add_node(node, ve, vec![TrafficUnit::Vehicle(Box::new(v))])
    }

    pub fn vehicle(&self, id: &str) -> Option<&VehicleAgent> {
        self.world.all_units().filter_map(TrafficUnit::as_vehicle).find(|v| v.id() == id)
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleAgent> {
        self.world.all_units().filter_map(TrafficUnit::as_vehicle)
    }

    pub fn ia(&self, v: &Vertex) -> Option<&IaAgent> {
        self.world.host(&ia_node(v))?.units.iter().find_map(TrafficUnit::as_ia)
    }

    pub fn step_tick(&mut self) {
        self.world.step_tick();
    }

    pub fn run(&mut self, ticks: u64) {
        self.world.run(ticks);
    }
}

/// Paths found by one exploration ant from `origin` to `destination`
/// through a network of infrastructure agents.
pub fn explore_paths(
    graph: Arc<SegmentGraph>,
    origin: &Vertex,
    destination: &Vertex,
    max_dist: f64,
    budget: u32,
    network: NetworkConfig,
) -> Result<BTreeSet<GraphPath>, KernelError> {
    let mut s = TrafficScenario::new(network, graph.clone(), AntConfig::default(), 1024)?;
    let ant = ExploreAnt {
        origin: origin.clone(),
        destination: destination.clone(),
        max_dist,
        budget,
        vehicle: "probe".into(),
        path: GraphPath::new(vec![origin.clone()]),
        cost: 0.0,
    };
    let node = NodeId::new("probe-node");
    let ve = s.world.environment(&node);
    let o = s.world.ordinal();
    s.world.add_node(node, ve, vec![TrafficUnit::Probe(Box::new(Probe::new("probe", ant, o)))])?;
    let horizon = (budget as u64 + 2) * (s.world.kernel().network().latency_ticks.max(1) + 1) * 2 + 4;
    s.run(horizon);
    let found = s.world.units().find_map(TrafficUnit::as_probe).map(Probe::found).unwrap_or_default();
    Ok(found)
}
