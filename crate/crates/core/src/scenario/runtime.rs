//! Runs virtual environments and their agents on the simulation kernel.
//!
//! Every tick each live node gets a `cycle` event: its virtual environment
//! synchronizes, then every hosted agent runs one cycle. Transmissions,
//! operations and notes are kernel events, so the trace records them all.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::agent::{Agent, CommBranch, ProtocolHandler};
use crate::codec::ContentLanguage;
use crate::env::{AgentAddress, Operation, Transmission, VeOutput, VirtualEnvironment};
use crate::graph::SegmentGraph;
use crate::kernel::{Event, EventRecord, Kernel, KernelError, NetworkConfig, NodeId, Tick, TracePayload};
use crate::locking::safety_violations;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum Payload {
    Cycle,
    Net(Transmission),
    Note { kind: String, detail: String },
    Operation(Operation),
    Agent { agent: String, kind: String, detail: String },
}

impl TracePayload for Payload {
    fn kind(&self) -> &str {
        match self {
            Payload::Cycle => "cycle",
            Payload::Net(Transmission::Message { .. }) => "message",
            Payload::Net(Transmission::Sync { .. }) => "sync",
            Payload::Note { .. } => "note",
            Payload::Operation(_) => "operation",
            Payload::Agent { .. } => "agent",
        }
    }
}

/// One agent together with its behavior.
pub trait Unit {
    fn agent(&self) -> &Agent;
    fn agent_mut(&mut self) -> &mut Agent;
    fn cycle(&mut self, ctx: &mut Ctx);
}

/// What a unit sees during its cycle.
pub struct Ctx<'a> {
    pub ve: &'a mut VirtualEnvironment,
    pub lang: &'a ContentLanguage,
    pub now: Tick,
    /// Communication dispatches allowed per cycle.
    pub budget: usize,
}

/// Run the agent's communication pipeline until it goes silent or the
/// budget is spent, handing every produced message to the environment.
pub fn communicate(agent: &mut Agent, handlers: &mut [&mut dyn ProtocolHandler], ctx: &mut Ctx) {
    for _ in 0..ctx.budget {
        let branch = agent.communicate_step(handlers, ctx.lang, ctx.now);
        for m in agent.take_outbox() {
            if let Err(e) = ctx.ve.send_message(m) {
                agent.event("sendFailed", e.to_string());
            }
        }
        if branch == CommBranch::Silent {
            break;
        }
    }
}

pub struct Host<U> {
    pub ve: VirtualEnvironment,
    pub units: Vec<U>,
}

pub struct World<U> {
    kernel: Kernel<Payload>,
    hosts: BTreeMap<NodeId, Host<U>>,
    departed: BTreeMap<NodeId, Host<U>>,
    graph: Arc<SegmentGraph>,
    lang: Arc<ContentLanguage>,
    next_tick: Tick,
    comm_budget: usize,
    next_ordinal: u64,
    lock_violations: Vec<(Tick, u64, u64)>,
    granted: BTreeSet<u64>,
}

impl<U: Unit> World<U> {
    pub fn new(
        network: NetworkConfig,
        graph: Arc<SegmentGraph>,
        lang: Arc<ContentLanguage>,
        comm_budget: usize,
    ) -> Result<Self, KernelError> {
        Ok(World {
            kernel: Kernel::new(network)?,
            hosts: BTreeMap::new(),
            departed: BTreeMap::new(),
            graph,
            lang,
            next_tick: Tick(0),
            comm_budget,
            next_ordinal: 1,
            lock_violations: Vec::new(),
            granted: BTreeSet::new(),
        })
    }

    pub fn graph(&self) -> &Arc<SegmentGraph> {
        &self.graph
    }

    pub fn language(&self) -> &Arc<ContentLanguage> {
        &self.lang
    }

    /// Fresh ordinal for a virtual environment or an agent.
    pub fn ordinal(&mut self) -> u64 {
        let o = self.next_ordinal;
        self.next_ordinal += 1;
        o
    }

    /// Environment with the standard types for `node`.
    pub fn environment(&mut self, node: &NodeId) -> VirtualEnvironment {
        let o = self.ordinal();
        VirtualEnvironment::with_standard_types(node.clone(), o, self.graph.clone(), self.lang.clone())
    }

    pub fn kernel(&self) -> &Kernel<Payload> {
        &self.kernel
    }

    pub fn now(&self) -> Tick {
        self.kernel.now()
    }

    /// The tick the next [`step_tick`](Self::step_tick) runs.
    pub fn next_tick(&self) -> Tick {
        self.next_tick
    }

    pub fn hosts(&self) -> &BTreeMap<NodeId, Host<U>> {
        &self.hosts
    }

    pub fn host(&self, node: &NodeId) -> Option<&Host<U>> {
        self.hosts.get(node)
    }

    pub fn host_mut(&mut self, node: &NodeId) -> Option<&mut Host<U>> {
        self.hosts.get_mut(node)
    }

    pub fn departed(&self) -> &BTreeMap<NodeId, Host<U>> {
        &self.departed
    }

    /// Live and departed units.
    pub fn all_units(&self) -> impl Iterator<Item = &U> {
        self.hosts.values().chain(self.departed.values()).flat_map(|h| h.units.iter())
    }

    pub fn units(&self) -> impl Iterator<Item = &U> {
        self.hosts.values().flat_map(|h| h.units.iter())
    }

    pub fn node_of(&self, agent: &str) -> Option<&NodeId> {
        self.hosts.iter().find(|(_, h)| h.units.iter().any(|u| u.agent().id() == agent)).map(|(n, _)| n)
    }

    /// Ticks at which two granted claims shared a segment.
    pub fn lock_violations(&self) -> &[(Tick, u64, u64)] {
        &self.lock_violations
    }

    /// Projection ids that were granted at some point.
    pub fn granted(&self) -> &BTreeSet<u64> {
        &self.granted
    }

    /// Join a node hosting `units`. Hosting in the environment happens
    /// here; the address book update runs when the join event fires.
    pub fn add_node(&mut self, node: NodeId, mut ve: VirtualEnvironment, mut units: Vec<U>) -> Result<(), KernelError> {
        self.begin_tick();
        units.sort_by(|a, b| a.agent().id().cmp(b.agent().id()));
        for u in &units {
            ve.host(u.agent().id(), u.agent().kind());
        }
        let hosted = units.iter().map(|u| u.agent().id().to_string()).collect();
        self.kernel.join_node(node.clone(), hosted)?;
        self.departed.remove(&node);
        self.hosts.insert(node, Host { ve, units });
        Ok(())
    }

    /// Take a node down; its queued events are dropped by the kernel.
    pub fn leave(&mut self, node: &NodeId) -> Result<(), KernelError> {
        self.begin_tick();
        self.kernel.leave_node(node)?;
        if let Some(h) = self.hosts.remove(node) {
            self.departed.insert(node.clone(), h);
        }
        Ok(())
    }

    /// Record a note in the trace at the current tick.
    pub fn note(&mut self, node: &NodeId, kind: &str, detail: String) {
        let _ = self.kernel.schedule(node.clone(), Payload::Note { kind: kind.into(), detail }, 0);
    }

    /// Bring the clock to the next tick so that scenario hooks can act at
    /// it before [`step_tick`](Self::step_tick).
    pub fn begin_tick(&mut self) -> Tick {
        let t = self.next_tick;
        self.kernel.advance_to(t);
        t
    }

    /// Run one tick: pending deliveries first, then one cycle per node.
    pub fn step_tick(&mut self) {
        let t = self.next_tick;
        while self.kernel.peek_tick().is_some_and(|p| p < t) {
            let Some(rec) = self.kernel.pop() else { break };
            self.dispatch(rec);
        }
        self.begin_tick();
        let nodes: Vec<NodeId> = self.hosts.keys().cloned().collect();
        for n in nodes {
            let _ = self.kernel.schedule(n, Payload::Cycle, 0);
        }
        while self.kernel.peek_tick() == Some(t) {
            let Some(rec) = self.kernel.pop() else { break };
            self.dispatch(rec);
        }
        for (a, b) in safety_violations(self.hosts.values().map(|h| h.ve.claims())) {
            self.lock_violations.push((t, a, b));
        }
        self.next_tick = t + 1;
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step_tick();
        }
    }

    fn addresses(&self, node: &NodeId) -> Vec<AgentAddress> {
        self.hosts
            .get(node)
            .map(|h| {
                h.units
                    .iter()
                    .map(|u| AgentAddress { agent: u.agent().id().to_string(), kind: u.agent().kind().to_string() })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn dispatch(&mut self, rec: EventRecord<Payload>) {
        let node = rec.node.clone();
        match rec.event {
            Event::Joined => {
                let agents = self.addresses(&node);
                let others: Vec<NodeId> = self.hosts.keys().filter(|n| **n != node).cloned().collect();
                for h in self.hosts.values_mut() {
                    h.ve.set_now(rec.tick);
                    h.ve.on_membership(&node, true, &agents);
                }
                for o in &others {
                    let theirs = self.addresses(o);
                    if let Some(h) = self.hosts.get_mut(&node) {
                        h.ve.on_membership(o, true, &theirs);
                    }
                }
                let all: Vec<NodeId> = self.hosts.keys().cloned().collect();
                for n in all {
                    self.flush(&n);
                }
            }
            Event::Left => {
                let all: Vec<NodeId> = self.hosts.keys().cloned().collect();
                for n in all {
                    if let Some(h) = self.hosts.get_mut(&n) {
                        h.ve.on_membership(&node, false, &[]);
                    }
                    self.flush(&n);
                }
            }
            Event::Deliver { from, body: Payload::Net(t) } => {
                if let Some(h) = self.hosts.get_mut(&node) {
                    h.ve.set_now(rec.tick);
                    h.ve.deliver_transmission(&from, &t);
                }
                self.flush(&node);
            }
            Event::Local(Payload::Cycle) => self.cycle(&node, rec.tick),
            _ => {}
        }
    }

    fn cycle(&mut self, node: &NodeId, now: Tick) {
        let Some(h) = self.hosts.get_mut(node) else { return };
        h.ve.set_now(now);
        h.ve.synchronize_local();
        self.flush(node);
        let count = self.hosts.get(node).map_or(0, |h| h.units.len());
        for i in 0..count {
            let lang = self.lang.clone();
            let budget = self.comm_budget;
            let Some(h) = self.hosts.get_mut(node) else { return };
            let Host { ve, units } = h;
            let unit = &mut units[i];
            let mut ctx = Ctx { ve, lang: &lang, now, budget };
            unit.cycle(&mut ctx);
            let id = unit.agent().id().to_string();
            let events = unit.agent_mut().take_events();
            for e in events {
                let p = Payload::Agent { agent: id.clone(), kind: e.kind, detail: e.detail };
                let _ = self.kernel.schedule(node.clone(), p, 0);
            }
            self.flush(node);
        }
    }

    fn flush(&mut self, node: &NodeId) {
        let Some(h) = self.hosts.get_mut(node) else { return };
        let outputs = h.ve.drain_outputs();
        for out in outputs {
            match out {
                VeOutput::Deliver { agent, message } => {
                    if let Some(u) = h.units.iter_mut().find(|u| u.agent().id() == agent) {
                        u.agent_mut().deliver(message);
                    }
                }
                VeOutput::Transmit { to, transmission } => {
                    let _ = self.kernel.transmit(node, &to, Payload::Net(transmission));
                }
                VeOutput::Operation(op) => {
                    let _ = self.kernel.schedule(node.clone(), Payload::Operation(op), 0);
                }
                VeOutput::Locked { agent, projection_id } => {
                    self.granted.insert(projection_id);
                    let p = Payload::Note { kind: "locked".into(), detail: format!("{agent} {projection_id}") };
                    let _ = self.kernel.schedule(node.clone(), p, 0);
                }
                VeOutput::Note { kind, detail } => {
                    let _ = self.kernel.schedule(node.clone(), Payload::Note { kind, detail }, 0);
                }
            }
        }
    }
}
