//! Delegate ants for anticipatory vehicle routing.
//!
//! Infrastructure agents sit on graph vertices and manage the segments
//! entered from their vertex. Exploration ants branch through them to find
//! routes; intention ants walk a booking's entries to reserve time windows.
//! Both are plain messages under their own protocols.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{Conversation, Outbound, ProtocolHandler};
use crate::codec::{ContentLanguage, Domain, MessageData};
use crate::graph::{EdgeId, GraphPath, SegmentGraph, Vertex};
use crate::kernel::Tick;
use crate::perception::{congestion_level, interpret, StatusThresholds, TrafficObservation, TrafficState, TrafficStatus};
use crate::value::{Knowledge, Value};

pub const EXPLORE: &str = "ExplorePaths";
pub const INTENTION: &str = "PropagateIntention";

pub fn register_schema(lang: &mut ContentLanguage) {
    lang.register(
        EXPLORE,
        "explore",
        &[
            ("origin", Domain::Node),
            ("destination", Domain::Node),
            ("maxDist", Domain::Meters),
            ("budget", Domain::Count),
            ("vehicle", Domain::Ident),
            ("path", Domain::Path),
            ("cost", Domain::Meters),
        ],
    );
    lang.register(EXPLORE, "pathFound", &[("path", Domain::Path), ("cost", Domain::Meters)]);
    lang.register(INTENTION, "booking", &[("booking", Domain::Booking)]);
    lang.register(INTENTION, "bookingAck", &[("booking", Domain::Booking)]);
    lang.register(INTENTION, "bookingReject", &[("reason", Domain::Text), ("prefix", Domain::Booking)]);
}

/// Id of the infrastructure agent on vertex `v`.
pub fn ia_id(v: &Vertex) -> String {
    format!("ia-{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub infrastructure_agent: String,
    pub edge_id: EdgeId,
    /// Half-open tick window `[start, end)`.
    pub window: (Tick, Tick),
    pub acked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Booking {
    pub booking_id: u64,
    pub vehicle_id: String,
    pub entries: Vec<Entry>,
    pub last_refresh_tick: Tick,
}

impl Booking {
    /// Structural checks that need no graph.
    pub fn validate(&self) -> Result<(), String> {
        if self.entries.is_empty() {
            return Err("booking has no entries".into());
        }
        let mut prev_end: Option<Tick> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.window.0 >= e.window.1 {
                return Err(format!("entry {i} has an empty window"));
            }
            if prev_end.is_some_and(|p| e.window.0 < p) {
                return Err(format!("entry {i} overlaps its predecessor"));
            }
            prev_end = Some(e.window.1);
        }
        Ok(())
    }

    /// Whether the entries follow a connected path of `graph`.
    pub fn follows_path(&self, graph: &SegmentGraph) -> bool {
        self.path(graph).is_some()
    }

    /// The vertex sequence the entries traverse.
    pub fn path(&self, graph: &SegmentGraph) -> Option<GraphPath> {
        let mut nodes: Vec<Vertex> = Vec::new();
        for e in &self.entries {
            let from = Vertex::from(e.infrastructure_agent.strip_prefix("ia-")?);
            if let Some(last) = nodes.last() {
                if last != &from {
                    return None;
                }
            } else {
                nodes.push(from.clone());
            }
            let to = graph.neighbors(&from).iter().find(|(id, _)| *id == e.edge_id).map(|(_, n)| n.clone())?;
            nodes.push(to);
        }
        (!nodes.is_empty()).then(|| GraphPath::new(nodes))
    }

    pub fn next_unacked(&self) -> Option<usize> {
        self.entries.iter().position(|e| !e.acked)
    }

    pub fn all_acked(&self) -> bool {
        self.entries.iter().all(|e| e.acked)
    }
}

/// Booking for `path`, entered at `now` and driven at `speed` meters per
/// tick. Every segment gets at least one tick.
pub fn plan_booking(
    booking_id: u64,
    vehicle: &str,
    path: &GraphPath,
    graph: &SegmentGraph,
    now: Tick,
    speed: f64,
) -> Option<Booking> {
    let edges = graph.path_edges(path)?;
    let mut t = now.0;
    let mut entries = Vec::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        let len = graph.edge(*e)?.length;
        let dur = ((len / speed).ceil() as u64).max(1);
        entries.push(Entry {
            infrastructure_agent: ia_id(&path.nodes[i]),
            edge_id: *e,
            window: (Tick(t), Tick(t + dur)),
            acked: false,
        });
        t += dur;
    }
    (!entries.is_empty()).then_some(Booking { booking_id, vehicle_id: vehicle.to_string(), entries, last_refresh_tick: now })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntConfig {
    /// Intention refresh period of a vehicle.
    pub refresh_period: u64,
    pub explore_period: u64,
    /// Ticks between a vehicle's first exploration and its first decision.
    pub explore_lead: u64,
    /// Reservation lifetime without refresh.
    pub ttl: u64,
    /// Revision threshold as a fraction of the current path length.
    pub revision: f64,
    pub hop_budget: u32,
    /// Exploration radius as a multiple of the shortest distance.
    pub explore_slack: f64,
    /// Other vehicles' overlapping reservations that make an edge full.
    pub capacity: usize,
    pub thresholds: StatusThresholds,
    /// Cost multiplier per traffic status, from free flow to jammed.
    pub multipliers: [f64; 4],
    /// Vehicle speed in meters per tick.
    pub speed: f64,
}

impl Default for AntConfig {
    fn default() -> Self {
        AntConfig {
            refresh_period: 20,
            explore_period: 20,
            explore_lead: 10,
            ttl: 50,
            revision: 0.1,
            hop_budget: 12,
            explore_slack: 1.5,
            capacity: 4,
            thresholds: StatusThresholds { moderate: 1.0, heavy: 2.0, jammed: 3.0 },
            multipliers: [1.0, 1.5, 2.0, 3.0],
            speed: 2.0,
        }
    }
}

impl AntConfig {
    pub fn multiplier(&self, status: TrafficStatus) -> f64 {
        match status {
            TrafficStatus::FreeFlow => self.multipliers[0],
            TrafficStatus::Moderate => self.multipliers[1],
            TrafficStatus::Heavy => self.multipliers[2],
            TrafficStatus::Jammed => self.multipliers[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub booking_id: u64,
    pub window: (Tick, Tick),
    pub last_refresh: Tick,
    /// Configured reservations never evaporate.
    pub fixed: bool,
}

fn overlaps(a: (Tick, Tick), b: (Tick, Tick)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreAnt {
    pub origin: Vertex,
    pub destination: Vertex,
    pub max_dist: f64,
    pub budget: u32,
    pub vehicle: String,
    pub path: GraphPath,
    pub cost: f64,
}

impl ExploreAnt {
    pub fn content(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("origin", Value::Node(self.origin.clone())),
            ("destination", Value::Node(self.destination.clone())),
            ("maxDist", Value::Num(self.max_dist)),
            ("budget", Value::Int(i64::from(self.budget))),
            ("vehicle", Value::Text(self.vehicle.clone())),
            ("path", Value::Path(self.path.clone())),
            ("cost", Value::Num(self.cost)),
        ]
    }

    pub fn from_data(d: &MessageData) -> Option<ExploreAnt> {
        Some(ExploreAnt {
            origin: d.field("origin")?.as_node()?.clone(),
            destination: d.field("destination")?.as_node()?.clone(),
            max_dist: d.field("maxDist")?.as_num()?,
            budget: u32::try_from(d.field("budget")?.as_int()?).ok()?,
            vehicle: d.text("vehicle")?.to_string(),
            path: d.field("path")?.as_path()?.clone(),
            cost: d.field("cost")?.as_num()?,
        })
    }
}

/// What an infrastructure agent sends in reaction to an ant.
#[derive(Debug, Clone, PartialEq)]
pub enum AntReply {
    Explore { to: String, ant: ExploreAnt },
    PathFound { to: String, path: GraphPath, cost: f64 },
    Forward { to: String, booking: Booking },
    Ack { to: String, booking: Booking },
    Reject { to: String, reason: String, booking: Booking },
}

impl AntReply {
    pub fn into_outbound(self, conversation: u64) -> Outbound {
        let (receiver, performative, content) = match self {
            AntReply::Explore { to, ant } => (to, "explore", ant.content()),
            AntReply::PathFound { to, path, cost } => {
                (to, "pathFound", vec![("path", Value::Path(path)), ("cost", Value::Num(cost))])
            }
            AntReply::Forward { to, booking } => (to, "booking", vec![("booking", Value::Booking(booking))]),
            AntReply::Ack { to, booking } => (to, "bookingAck", vec![("booking", Value::Booking(booking))]),
            AntReply::Reject { to, reason, booking } => {
                (to, "bookingReject", vec![("reason", Value::Text(reason)), ("prefix", Value::Booking(booking))])
            }
        };
        Outbound { conversation, receiver, performative: performative.to_string(), content }
    }
}

/// Local state of one infrastructure agent.
#[derive(Debug, Clone)]
pub struct Infrastructure {
    vertex: Vertex,
    graph: Arc<SegmentGraph>,
    cfg: AntConfig,
    /// Reservations per (edge, vehicle).
    reservations: BTreeMap<(EdgeId, String), Reservation>,
}

impl Infrastructure {
    pub fn new(vertex: Vertex, graph: Arc<SegmentGraph>, cfg: AntConfig) -> Self {
        Infrastructure { vertex, graph, cfg, reservations: BTreeMap::new() }
    }

    pub fn id(&self) -> String {
        ia_id(&self.vertex)
    }

    pub fn vertex(&self) -> &Vertex {
        &self.vertex
    }

    pub fn config(&self) -> &AntConfig {
        &self.cfg
    }

    pub fn reservations(&self) -> &BTreeMap<(EdgeId, String), Reservation> {
        &self.reservations
    }

    pub fn reservation(&self, edge: EdgeId, vehicle: &str) -> Option<&Reservation> {
        self.reservations.get(&(edge, vehicle.to_string()))
    }

    fn manages(&self, edge: EdgeId) -> bool {
        self.graph.neighbors(&self.vertex).iter().any(|(e, _)| *e == edge)
    }

    /// Install a reservation that never evaporates.
    pub fn reserve_fixed(&mut self, edge: EdgeId, vehicle: &str, window: (Tick, Tick)) {
        self.reservations.insert(
            (edge, vehicle.to_string()),
            Reservation { booking_id: 0, window, last_refresh: Tick(0), fixed: true },
        );
    }

    /// Reservations of vehicles other than `except` on `edge`, optionally
    /// only those overlapping `window`.
    pub fn load(&self, edge: EdgeId, window: Option<(Tick, Tick)>, except: &str) -> usize {
        self.reservations
            .iter()
            .filter(|((e, v), r)| *e == edge && v != except && window.is_none_or(|w| overlaps(w, r.window)))
            .count()
    }

    /// Predicted traffic on `edge` as seen by `vehicle`.
    pub fn predict_congestion(&self, edge: EdgeId, vehicle: &str) -> TrafficState {
        let density = self.load(edge, None, vehicle) as f64;
        let to = self
            .graph
            .neighbors(&self.vertex)
            .iter()
            .find(|(e, _)| *e == edge)
            .map(|(_, n)| n.clone())
            .unwrap_or_else(|| self.vertex.clone());
        let path = GraphPath::new(vec![self.vertex.clone(), to]);
        let obs = TrafficObservation { density, intensity: density, average_speed: self.cfg.speed };
        let k = interpret(&obs.to_representation(&path), &[congestion_level(self.cfg.thresholds)]);
        match k.get("trafficState") {
            Some(Value::Traffic(t)) => t.clone(),
            _ => TrafficState { path, status: TrafficStatus::FreeFlow },
        }
    }

    /// Drop every unfixed reservation older than the TTL. Returns the
    /// removed keys.
    pub fn evaporate(&mut self, now: Tick) -> Vec<(EdgeId, String)> {
        let ttl = self.cfg.ttl;
        let expired: Vec<(EdgeId, String)> = self
            .reservations
            .iter()
            .filter(|(_, r)| !r.fixed && now.0.saturating_sub(r.last_refresh.0) > ttl)
            .map(|(k, _)| k.clone())
            .collect();
        for k in &expired {
            self.reservations.remove(k);
        }
        expired
    }

    pub fn on_explore(&self, ant: &ExploreAnt) -> Vec<AntReply> {
        if ant.path.end() != Some(&self.vertex) {
            return Vec::new();
        }
        if self.vertex == ant.destination {
            return vec![AntReply::PathFound { to: ant.vehicle.clone(), path: ant.path.clone(), cost: ant.cost }];
        }
        if ant.budget == 0 {
            return Vec::new();
        }
        let Some(travelled) = self.graph.path_length(&ant.path) else { return Vec::new() };
        let mut out = Vec::new();
        for (e, n) in self.graph.neighbors(&self.vertex) {
            let Some(edge) = self.graph.edge(*e) else { continue };
            if ant.path.nodes.contains(n) || travelled + edge.length > ant.max_dist {
                continue;
            }
            let status = self.predict_congestion(*e, &ant.vehicle).status;
            let mut path = ant.path.clone();
            path.nodes.push(n.clone());
            out.push(AntReply::Explore {
                to: ia_id(n),
                ant: ExploreAnt {
                    budget: ant.budget - 1,
                    path,
                    cost: ant.cost + edge.length * self.cfg.multiplier(status),
                    ..ant.clone()
                },
            });
        }
        out
    }

    pub fn on_booking(&mut self, mut booking: Booking, now: Tick) -> AntReply {
        let vehicle = booking.vehicle_id.clone();
        let reject = |reason: String, booking: Booking| AntReply::Reject { to: vehicle.clone(), reason, booking };
        let Some(i) = booking.next_unacked() else {
            return AntReply::Ack { to: vehicle.clone(), booking };
        };
        let entry = booking.entries[i].clone();
        if entry.infrastructure_agent != self.id() || !self.manages(entry.edge_id) {
            return reject(format!("entry {i} is not managed by {}", self.id()), booking);
        }
        if self.load(entry.edge_id, Some(entry.window), &vehicle) >= self.cfg.capacity {
            return reject(format!("edge {} full during [{}, {})", entry.edge_id, entry.window.0, entry.window.1), booking);
        }
        self.reservations.insert(
            (entry.edge_id, vehicle.clone()),
            Reservation { booking_id: booking.booking_id, window: entry.window, last_refresh: now, fixed: false },
        );
        booking.entries[i].acked = true;
        match booking.entries.get(i + 1) {
            Some(next) => AntReply::Forward { to: next.infrastructure_agent.clone(), booking },
            None => AntReply::Ack { to: vehicle, booking },
        }
    }
}

pub type SharedInfrastructure = Rc<RefCell<Infrastructure>>;

/// Infrastructure side of exploration.
pub struct ExploreRelay {
    ia: SharedInfrastructure,
    pending: VecDeque<Outbound>,
    open: BTreeSet<u64>,
}

impl ExploreRelay {
    pub fn new(ia: SharedInfrastructure) -> Self {
        ExploreRelay { ia, pending: VecDeque::new(), open: BTreeSet::new() }
    }
}

impl ProtocolHandler for ExploreRelay {
    fn protocol(&self) -> &str {
        EXPLORE
    }

    fn opens(&self, performative: &str) -> bool {
        performative == "explore"
    }

    fn incoming(&mut self, d: &MessageData, _: &Knowledge, _: Tick) -> Knowledge {
        if let Some(ant) = ExploreAnt::from_data(d) {
            for r in self.ia.borrow().on_explore(&ant) {
                self.pending.push_back(r.into_outbound(d.conversation));
                self.open.insert(d.conversation);
            }
        }
        Knowledge::new()
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        let out = self.pending.pop_front()?;
        if !self.pending.iter().any(|o| o.conversation == out.conversation) {
            self.open.remove(&out.conversation);
        }
        Some(out)
    }

    fn is_final(&self, c: &Conversation) -> bool {
        !self.open.contains(&c.id)
    }
}

/// Infrastructure side of intention propagation.
pub struct IntentionRelay {
    ia: SharedInfrastructure,
    pending: VecDeque<Outbound>,
}

impl IntentionRelay {
    pub fn new(ia: SharedInfrastructure) -> Self {
        IntentionRelay { ia, pending: VecDeque::new() }
    }
}

impl ProtocolHandler for IntentionRelay {
    fn protocol(&self) -> &str {
        INTENTION
    }

    fn opens(&self, performative: &str) -> bool {
        performative == "booking"
    }

    fn incoming(&mut self, d: &MessageData, _: &Knowledge, now: Tick) -> Knowledge {
        if let Some(Value::Booking(b)) = d.field("booking") {
            let reply = self.ia.borrow_mut().on_booking(b.clone(), now);
            self.pending.push_back(reply.into_outbound(d.conversation));
        }
        Knowledge::new()
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        self.pending.pop_front()
    }

    fn is_final(&self, c: &Conversation) -> bool {
        !self.pending.iter().any(|o| o.conversation == c.id)
    }
}

/// One exploration round launched by a vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub origin: Vertex,
    pub launched: Tick,
    pub results: Vec<(GraphPath, f64)>,
}

/// Vehicle side of exploration: launches ants, collects found paths.
#[derive(Debug, Default)]
pub struct ExploreClient {
    pending: VecDeque<Outbound>,
    rounds: BTreeMap<u64, Round>,
    keep: usize,
}

impl ExploreClient {
    pub fn new() -> Self {
        ExploreClient { pending: VecDeque::new(), rounds: BTreeMap::new(), keep: 3 }
    }

    pub fn launch(&mut self, conversation: u64, ant: ExploreAnt, now: Tick) {
        let start = ant.path.start().cloned().unwrap_or_else(|| ant.origin.clone());
        self.rounds.insert(conversation, Round { origin: ant.origin.clone(), launched: now, results: Vec::new() });
        while self.rounds.len() > self.keep {
            self.rounds.pop_first();
        }
        self.pending.push_back(Outbound {
            conversation,
            receiver: ia_id(&start),
            performative: "explore".into(),
            content: ant.content(),
        });
    }

    pub fn rounds(&self) -> &BTreeMap<u64, Round> {
        &self.rounds
    }

    pub fn round(&self, conversation: u64) -> Option<&Round> {
        self.rounds.get(&conversation)
    }
}

impl ProtocolHandler for ExploreClient {
    fn protocol(&self) -> &str {
        EXPLORE
    }

    fn opens(&self, _: &str) -> bool {
        false
    }

    fn incoming(&mut self, d: &MessageData, _: &Knowledge, _: Tick) -> Knowledge {
        let (Some(path), Some(cost)) = (d.field("path").and_then(Value::as_path), d.field("cost").and_then(Value::as_num))
        else {
            return Knowledge::new();
        };
        if let Some(r) = self.rounds.get_mut(&d.conversation) {
            if path.start() == Some(&r.origin) && !r.results.iter().any(|(p, _)| p == path) {
                r.results.push((path.clone(), cost));
            }
        }
        Knowledge::new()
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        self.pending.pop_front()
    }

    fn is_final(&self, c: &Conversation) -> bool {
        !self.rounds.contains_key(&c.id)
    }
}

/// Outcome of one intention ant.
#[derive(Debug, Clone, PartialEq)]
pub enum BookingOutcome {
    Acked(Booking),
    Rejected { reason: String, prefix: Booking },
}

/// Vehicle side of intention propagation.
#[derive(Debug, Default)]
pub struct BookingClient {
    pending: VecDeque<Outbound>,
    outcomes: Vec<(Tick, BookingOutcome)>,
}

impl BookingClient {
    pub fn new() -> Self {
        BookingClient::default()
    }

    pub fn send(&mut self, conversation: u64, booking: Booking) {
        let Some(first) = booking.entries.first() else { return };
        self.pending.push_back(Outbound {
            conversation,
            receiver: first.infrastructure_agent.clone(),
            performative: "booking".into(),
            content: vec![("booking", Value::Booking(booking))],
        });
    }

    pub fn outcomes(&self) -> &[(Tick, BookingOutcome)] {
        &self.outcomes
    }

    pub fn rejects(&self) -> usize {
        self.outcomes.iter().filter(|(_, o)| matches!(o, BookingOutcome::Rejected { .. })).count()
    }
}

impl ProtocolHandler for BookingClient {
    fn protocol(&self) -> &str {
        INTENTION
    }

    fn opens(&self, _: &str) -> bool {
        false
    }

    fn incoming(&mut self, d: &MessageData, _: &Knowledge, now: Tick) -> Knowledge {
        let outcome = match (d.performative.as_str(), d.field("booking"), d.field("prefix")) {
            ("bookingAck", Some(Value::Booking(b)), _) => BookingOutcome::Acked(b.clone()),
            ("bookingReject", _, Some(Value::Booking(b))) => {
                BookingOutcome::Rejected { reason: d.text("reason").unwrap_or_default().to_string(), prefix: b.clone() }
            }
            _ => return Knowledge::new(),
        };
        self.outcomes.push((now, outcome));
        Knowledge::new()
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        self.pending.pop_front()
    }

    fn is_final(&self, c: &Conversation) -> bool {
        c.history.last().is_some_and(|m| m.performative != "booking")
    }
}

/// Decision state of a vehicle agent.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleCore {
    pub destination: Vertex,
    pub intention: Option<GraphPath>,
    pub cfg: AntConfig,
    /// Whether intention ants are re-sent every cycle.
    pub refresh: bool,
    pub switches: u64,
    pub bookings_sent: u64,
    pub last_booking: Option<Tick>,
    /// Round whose results the last decision used.
    pub consumed_round: Option<u64>,
}

/// Result of the decision half of a vehicle cycle.
#[derive(Debug, Clone, PartialEq)]
pub enum Revision {
    /// No usable exploration results.
    NoAlternatives,
    Kept,
    Adopted(GraphPath),
    Switched { from: GraphPath, to: GraphPath },
}

impl VehicleCore {
    pub fn new(destination: Vertex, cfg: AntConfig) -> Self {
        VehicleCore {
            destination,
            intention: None,
            cfg,
            refresh: true,
            switches: 0,
            bookings_sent: 0,
            last_booking: None,
            consumed_round: None,
        }
    }

    /// Drop the part of the intention behind `position`.
    pub fn advance(&mut self, position: &Vertex) {
        if let Some(p) = &self.intention {
            if let Some(i) = p.nodes.iter().position(|v| v == position) {
                self.intention = Some(GraphPath::new(p.nodes[i..].to_vec()));
            }
        }
    }

    /// Choose among exploration results. `ahead` is the part of the
    /// intention not yet passed; alternatives must start on it.
    /// `results` is the latest round's `(origin, paths)`.
    pub fn revise(&mut self, ahead: &[Vertex], origin: &Vertex, results: &[(GraphPath, f64)], graph: &SegmentGraph) -> Revision {
        let best = results
            .iter()
            .filter(|(p, _)| p.start() == Some(origin) && p.end() == Some(&self.destination))
            .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.nodes.cmp(&b.0.nodes)));
        let Some((best, best_cost)) = best else { return Revision::NoAlternatives };
        let Some(current) = self.intention.clone() else {
            if ahead.first().is_some_and(|v| v != origin) {
                return Revision::NoAlternatives;
            }
            self.intention = Some(best.clone());
            return Revision::Adopted(best.clone());
        };
        let Some(split) = current.nodes.iter().position(|v| v == origin).filter(|i| ahead.contains(&current.nodes[*i]))
        else {
            return Revision::NoAlternatives;
        };
        let tail = GraphPath::new(current.nodes[split..].to_vec());
        let tail_cost = results.iter().find(|(p, _)| *p == tail).map(|(_, c)| *c).unwrap_or(f64::INFINITY);
        let rho = self.cfg.revision * graph.path_length(&tail).unwrap_or(0.0);
        if tail_cost - best_cost >= rho && *best != tail {
            let mut nodes = current.nodes[..split].to_vec();
            nodes.extend(best.nodes.iter().cloned());
            let next = GraphPath::new(nodes);
            self.intention = Some(next.clone());
            self.switches += 1;
            return Revision::Switched { from: current, to: next };
        }
        Revision::Kept
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> Arc<SegmentGraph> {
        let mut g = SegmentGraph::new(false);
        for v in ["a", "b", "c", "d"] {
            g.add_node(v).unwrap();
        }
        g.add_edge(1, "a", "b", 10.0).unwrap();
        g.add_edge(2, "b", "d", 10.0).unwrap();
        g.add_edge(3, "a", "c", 10.0).unwrap();
        g.add_edge(4, "c", "d", 10.0).unwrap();
        Arc::new(g)
    }

    fn ant(path: &[&str], budget: u32) -> ExploreAnt {
        ExploreAnt {
            origin: "a".into(),
            destination: "d".into(),
            max_dist: 25.0,
            budget,
            vehicle: "car".into(),
            path: GraphPath::from_strs(path),
            cost: 0.0,
        }
    }

    #[test]
    fn booking_validation() {
        let g = diamond();
        let b = plan_booking(1, "car", &GraphPath::from_strs(&["a", "b", "d"]), &g, Tick(3), 2.0).unwrap();
        assert!(b.validate().is_ok());
        assert_eq!(b.entries[0].window, (Tick(3), Tick(8)));
        assert_eq!(b.entries[1].window, (Tick(8), Tick(13)));
        assert_eq!(b.path(&g), Some(GraphPath::from_strs(&["a", "b", "d"])));
        let mut bad = b.clone();
        bad.entries[1].window = (Tick(7), Tick(9));
        assert!(bad.validate().is_err());
        let mut broken = b.clone();
        broken.entries[1].infrastructure_agent = "ia-c".into();
        assert!(!broken.follows_path(&g));
        let empty = Booking { entries: Vec::new(), ..b };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn explore_branches_and_dies() {
        let ia = Infrastructure::new("a".into(), diamond(), AntConfig::default());
        let out = ia.on_explore(&ant(&["a"], 3));
        assert_eq!(out.len(), 2);
        assert!(matches!(&out[0], AntReply::Explore { to, ant } if to == "ia-b" && ant.budget == 2 && ant.cost == 10.0));
        assert!(ia.on_explore(&ant(&["a"], 0)).is_empty());
        let far = ExploreAnt { max_dist: 5.0, ..ant(&["a"], 3) };
        assert!(ia.on_explore(&far).is_empty());
        let d = Infrastructure::new("d".into(), diamond(), AntConfig::default());
        let found = d.on_explore(&ant(&["a", "b", "d"], 1));
        assert!(matches!(&found[..], [AntReply::PathFound { to, .. }] if to == "car"));
    }

    #[test]
    fn booking_chain_and_conflict() {
        let g = diamond();
        let cfg = AntConfig { capacity: 1, ..AntConfig::default() };
        let mut a = Infrastructure::new("a".into(), g.clone(), cfg.clone());
        let mut b = Infrastructure::new("b".into(), g.clone(), cfg);
        let booking = plan_booking(7, "car", &GraphPath::from_strs(&["a", "b", "d"]), &g, Tick(0), 2.0).unwrap();
        let AntReply::Forward { to, booking } = a.on_booking(booking, Tick(0)) else { panic!() };
        assert_eq!(to, "ia-b");
        assert!(booking.entries[0].acked && !booking.entries[1].acked);
        let AntReply::Ack { booking, .. } = b.on_booking(booking, Tick(1)) else { panic!() };
        assert!(booking.all_acked());

        let other = plan_booking(8, "bus", &GraphPath::from_strs(&["a", "b"]), &g, Tick(2), 2.0).unwrap();
        let AntReply::Reject { booking, .. } = a.on_booking(other, Tick(2)) else { panic!() };
        assert!(!booking.entries[0].acked);
        let later = plan_booking(9, "bus", &GraphPath::from_strs(&["a", "b"]), &g, Tick(5), 2.0).unwrap();
        assert!(matches!(a.on_booking(later, Tick(5)), AntReply::Ack { .. }));
    }

    #[test]
    fn evaporation_is_strict() {
        let g = diamond();
        let mut a = Infrastructure::new("a".into(), g.clone(), AntConfig::default());
        let booking = plan_booking(1, "car", &GraphPath::from_strs(&["a", "b"]), &g, Tick(0), 2.0).unwrap();
        a.on_booking(booking, Tick(10));
        a.reserve_fixed(EdgeId(3), "static", (Tick(0), Tick(1000)));
        assert!(a.evaporate(Tick(60)).is_empty());
        assert_eq!(a.evaporate(Tick(61)), vec![(EdgeId(1), "car".to_string())]);
        assert_eq!(a.reservations().len(), 1);
    }

    #[test]
    fn congestion_levels() {
        let mut a = Infrastructure::new("a".into(), diamond(), AntConfig::default());
        assert_eq!(a.predict_congestion(EdgeId(1), "car").status, TrafficStatus::FreeFlow);
        for v in ["x", "y"] {
            a.reserve_fixed(EdgeId(1), v, (Tick(0), Tick(5)));
        }
        assert_eq!(a.predict_congestion(EdgeId(1), "car").status, TrafficStatus::Heavy);
        assert_eq!(a.predict_congestion(EdgeId(1), "x").status, TrafficStatus::Moderate);
        for v in ["z", "w"] {
            a.reserve_fixed(EdgeId(1), v, (Tick(0), Tick(5)));
        }
        assert_eq!(a.predict_congestion(EdgeId(1), "car").status, TrafficStatus::Jammed);
    }

    #[test]
    fn revision_hysteresis() {
        let g = diamond();
        let mut core = VehicleCore::new("d".into(), AntConfig::default());
        let ab = GraphPath::from_strs(&["a", "b", "d"]);
        let ac = GraphPath::from_strs(&["a", "c", "d"]);
        let a: Vertex = "a".into();
        assert_eq!(core.revise(&[a.clone()], &a, &[], &g), Revision::NoAlternatives);
        assert_eq!(core.revise(&[a.clone()], &a, &[(ac.clone(), 20.0), (ab.clone(), 20.0)], &g), Revision::Adopted(ab.clone()));
        assert_eq!(core.revise(&[a.clone()], &a, &[(ab.clone(), 20.0), (ac.clone(), 20.0)], &g), Revision::Kept);
        // rho is 2.0 on a 20 m path
        assert_eq!(core.revise(&[a.clone()], &a, &[(ab.clone(), 21.9), (ac.clone(), 20.0)], &g), Revision::Kept);
        assert!(matches!(core.revise(&[a.clone()], &a, &[(ab.clone(), 22.0), (ac.clone(), 20.0)], &g), Revision::Switched { .. }));
        assert_eq!(core.intention, Some(ac));
        assert_eq!(core.switches, 1);
    }
}
