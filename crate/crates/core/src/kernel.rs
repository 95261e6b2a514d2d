//! Deterministic discrete-event kernel: a single `(tick, seq)` ordered queue,
//! a seeded lossy network between simulation nodes, and node membership.
//!
//! Every dispatched event is appended to the run trace as one line
//! `tick seq node kind payload`, where `payload` is canonical JSON (object
//! keys sorted). Two runs with the same configuration and seed produce the
//! same trace bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Pseudo node used for network-level records (lost transmissions).
pub const NET_NODE: &str = "net";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Add<u64> for Tick {
    type Output = Tick;
    fn add(self, rhs: u64) -> Tick {
        Tick(self.0 + rhs)
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub latency_ticks: u64,
    /// Probability in `[0, 1]` that a single transmission is lost.
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { latency_ticks: 1, drop_probability: 0.0, seed: 0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("kernel is finalized")]
    Finalized,
    #[error("node {0} already joined")]
    AlreadyJoined(NodeId),
    #[error("node {0} is not alive")]
    NotAlive(NodeId),
    #[error("invalid node id {0:?}")]
    InvalidNodeId(String),
    #[error("drop probability {0} outside [0, 1]")]
    InvalidDropProbability(f64),
}

/// Payloads carried by kernel events. The canonical trace text is the JSON
/// serialization of the payload.
pub trait TracePayload: Clone + Serialize {
    fn kind(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LossReason {
    Dropped,
    UnknownDestination,
    DeadDestination,
    DestinationLeft,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event<P> {
    /// Node-local event (timers, agent cycles, notes).
    Local(P),
    /// A transmission arriving at the record's node.
    Deliver { from: NodeId, body: P },
    Lost { from: NodeId, to: NodeId, reason: LossReason, body: P },
    Joined,
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord<P> {
    pub tick: Tick,
    pub seq: u64,
    pub node: NodeId,
    pub event: Event<P>,
}

impl<P: TracePayload> EventRecord<P> {
    pub fn kind(&self) -> &str {
        match &self.event {
            Event::Local(p) => p.kind(),
            Event::Deliver { .. } => "deliver",
            Event::Lost { .. } => "lost",
            Event::Joined => "join",
            Event::Left => "leave",
        }
    }

    pub fn canonical_payload(&self) -> String {
        let value = match &self.event {
            Event::Local(p) => canonical_value(p),
            Event::Deliver { from, body } => serde_json::json!({
                "from": from.as_str(),
                "kind": body.kind(),
                "body": canonical_value(body),
            }),
            Event::Lost { from, to, reason, body } => serde_json::json!({
                "from": from.as_str(),
                "to": to.as_str(),
                "reason": reason,
                "kind": body.kind(),
                "body": canonical_value(body),
            }),
            Event::Joined | Event::Left => serde_json::Value::Null,
        };
        value.to_string()
    }

    pub fn trace_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.tick,
            self.seq,
            self.node,
            self.kind(),
            self.canonical_payload()
        )
    }
}

fn canonical_value<T: Serialize>(v: &T) -> serde_json::Value {
    // serde_json's default map is a BTreeMap, so object keys come out sorted.
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// 64-bit trace digest: the first eight bytes of SHA-256 over the trace text.
pub fn trace_hash(trace_text: &str) -> u64 {
    let digest = Sha256::digest(trace_text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(bytes)
}

/// Stream id of the per-channel RNG for the ordered pair `(from, to)`.
pub fn channel_stream(from: &NodeId, to: &NodeId) -> u64 {
    let mut h = Sha256::new();
    h.update(from.as_str().as_bytes());
    h.update([0u8]);
    h.update(to.as_str().as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(bytes)
}

#[derive(Debug, Clone, Default)]
pub struct SimNode {
    pub alive: bool,
    pub hosted_agents: BTreeSet<String>,
}

pub struct Kernel<P> {
    now: Tick,
    next_seq: u64,
    queue: BTreeMap<(Tick, u64), EventRecord<P>>,
    nodes: BTreeMap<NodeId, SimNode>,
    network: NetworkConfig,
    channels: BTreeMap<(NodeId, NodeId), ChaCha8Rng>,
    finalized: bool,
    trace: String,
    trace_enabled: bool,
}

impl<P: TracePayload> Kernel<P> {
    pub fn new(network: NetworkConfig) -> Result<Self, KernelError> {
        if !(0.0..=1.0).contains(&network.drop_probability) {
            return Err(KernelError::InvalidDropProbability(network.drop_probability));
        }
        Ok(Kernel {
            now: Tick(0),
            next_seq: 0,
            queue: BTreeMap::new(),
            nodes: BTreeMap::new(),
            network,
            channels: BTreeMap::new(),
            finalized: false,
            trace: String::new(),
            trace_enabled: true,
        })
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.network
    }

    /// Disable trace capture (the digest is still computed by callers from
    /// [`Kernel::trace`], which then stays empty).
    pub fn set_trace_enabled(&mut self, enabled: bool) {
        self.trace_enabled = enabled;
    }

    pub fn trace(&self) -> &str {
        &self.trace
    }

    pub fn trace_hash(&self) -> u64 {
        trace_hash(&self.trace)
    }

    pub fn finalize(&mut self) {
        self.finalized = true;
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_alive(&self, node: &NodeId) -> bool {
        self.nodes.get(node).is_some_and(|n| n.alive)
    }

    pub fn node(&self, node: &NodeId) -> Option<&SimNode> {
        self.nodes.get(node)
    }

    pub fn alive_nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().filter(|(_, n)| n.alive).map(|(id, _)| id)
    }

    fn enqueue(&mut self, tick: Tick, node: NodeId, event: Event<P>) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((tick, seq), EventRecord { tick, seq, node, event });
        seq
    }

    /// Schedule a node-local event `delay` ticks from now. Returns its seq.
    pub fn schedule(&mut self, node: NodeId, payload: P, delay: u64) -> Result<u64, KernelError> {
        if self.finalized {
            return Err(KernelError::Finalized);
        }
        let at = self.now + delay;
        Ok(self.enqueue(at, node, Event::Local(payload)))
    }

    /// Send `body` from one node to another over the simulated network.
    pub fn transmit(&mut self, from: &NodeId, to: &NodeId, body: P) -> Result<(), KernelError> {
        if self.finalized {
            return Err(KernelError::Finalized);
        }
        if !self.is_alive(from) {
            return Err(KernelError::NotAlive(from.clone()));
        }
        let now = self.now;
        let lost = |reason| Event::Lost { from: from.clone(), to: to.clone(), reason, body: body.clone() };
        match self.nodes.get(to) {
            None => {
                self.enqueue(now, NodeId::from(NET_NODE), lost(LossReason::UnknownDestination));
                return Ok(());
            }
            Some(n) if !n.alive => {
                self.enqueue(now, NodeId::from(NET_NODE), lost(LossReason::DeadDestination));
                return Ok(());
            }
            Some(_) => {}
        }
        let seed = self.network.seed;
        let rng = self
            .channels
            .entry((from.clone(), to.clone()))
            .or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(channel_stream(from, to));
                rng
            });
        let draw: f64 = rng.gen();
        if draw < self.network.drop_probability {
            self.enqueue(now, NodeId::from(NET_NODE), lost(LossReason::Dropped));
        } else {
            let at = now + self.network.latency_ticks;
            self.enqueue(at, to.clone(), Event::Deliver { from: from.clone(), body });
        }
        Ok(())
    }

    pub fn join_node(&mut self, node: NodeId, hosted_agents: BTreeSet<String>) -> Result<(), KernelError> {
        if self.finalized {
            return Err(KernelError::Finalized);
        }
        if node.0.is_empty() || node.0 == NET_NODE || node.0.chars().any(char::is_whitespace) {
            return Err(KernelError::InvalidNodeId(node.0));
        }
        if self.is_alive(&node) {
            return Err(KernelError::AlreadyJoined(node));
        }
        self.nodes.insert(node.clone(), SimNode { alive: true, hosted_agents });
        let now = self.now;
        self.enqueue(now, node, Event::Joined);
        Ok(())
    }

    /// Mark a node dead. In-flight transmissions addressed to it become
    /// lost-transmission records; its pending local events are discarded.
    pub fn leave_node(&mut self, node: &NodeId) -> Result<(), KernelError> {
        if self.finalized {
            return Err(KernelError::Finalized);
        }
        if !self.is_alive(node) {
            return Err(KernelError::NotAlive(node.clone()));
        }
        if let Some(n) = self.nodes.get_mut(node) {
            n.alive = false;
            n.hosted_agents.clear();
        }
        let doomed: Vec<(Tick, u64)> = self
            .queue
            .iter()
            .filter(|(_, r)| &r.node == node)
            .map(|(k, _)| *k)
            .collect();
        let now = self.now;
        self.enqueue(now, node.clone(), Event::Left);
        for key in doomed {
            let Some(rec) = self.queue.remove(&key) else { continue };
            if let Event::Deliver { from, body } = rec.event {
                let lost = Event::Lost { from, to: node.clone(), reason: LossReason::DestinationLeft, body };
                self.enqueue(now, NodeId::from(NET_NODE), lost);
            }
        }
        Ok(())
    }

    /// Pop the next event in `(tick, seq)` order, advancing time.
    pub fn pop(&mut self) -> Option<EventRecord<P>> {
        let (_, rec) = self.queue.pop_first()?;
        debug_assert!(rec.tick >= self.now);
        self.now = rec.tick;
        if self.trace_enabled {
            self.trace.push_str(&rec.trace_line());
            self.trace.push('\n');
        }
        Some(rec)
    }

    /// Move the clock forward to `tick` when nothing is queued before it.
    /// Returns whether the clock now reads `tick`.
    pub fn advance_to(&mut self, tick: Tick) -> bool {
        if tick < self.now || self.peek_tick().is_some_and(|t| t < tick) {
            return false;
        }
        self.now = tick;
        true
    }

    /// Tick of the next queued event, if any.
    pub fn peek_tick(&self) -> Option<Tick> {
        self.queue.first_key_value().map(|((t, _), _)| *t)
    }

    /// Advance to the next non-empty tick and dispatch every event queued
    /// for it at the time of the call. An empty queue leaves time unchanged.
    pub fn step(&mut self) -> Vec<EventRecord<P>> {
        let Some(tick) = self.peek_tick() else { return Vec::new() };
        let mut out = Vec::new();
        while self.peek_tick() == Some(tick) {
            if let Some(rec) = self.pop() {
                out.push(rec);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize)]
    struct Note(String);

    impl TracePayload for Note {
        fn kind(&self) -> &str {
            "note"
        }
    }

    fn kernel(latency: u64, drop: f64) -> Kernel<Note> {
        Kernel::new(NetworkConfig { latency_ticks: latency, drop_probability: drop, seed: 42 }).unwrap()
    }

    fn locals(recs: &[EventRecord<Note>]) -> Vec<String> {
        recs.iter()
            .filter_map(|r| match &r.event {
                Event::Local(n) => Some(n.0.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn empty_step_keeps_time() {
        let mut k = kernel(0, 0.0);
        assert!(k.step().is_empty());
        assert_eq!(k.now(), Tick(0));
    }

    #[test]
    fn delay_arithmetic_and_jump() {
        let mut k = kernel(0, 0.0);
        k.schedule("a".into(), Note("x".into()), 3).unwrap();
        let recs = k.step();
        assert_eq!(recs.len(), 1);
        assert_eq!(k.now(), Tick(3));
        k.schedule("a".into(), Note("y".into()), 5).unwrap();
        let recs = k.step();
        assert_eq!(recs[0].tick, Tick(8));
    }

    #[test]
    fn zero_delay_fires_after_already_queued() {
        let mut k = kernel(0, 0.0);
        k.schedule("a".into(), Note("first".into()), 0).unwrap();
        k.schedule("b".into(), Note("second".into()), 0).unwrap();
        let first = k.pop().unwrap();
        k.schedule("a".into(), Note("third".into()), 0).unwrap();
        let rest = k.step();
        assert_eq!(locals(&[first]), vec!["first"]);
        assert_eq!(locals(&rest), vec!["second", "third"]);
    }

    #[test]
    fn finalized_kernel_rejects_scheduling() {
        let mut k = kernel(0, 0.0);
        k.finalize();
        assert_eq!(k.schedule("a".into(), Note("x".into()), 0), Err(KernelError::Finalized));
    }

    #[test]
    fn transmit_latency() {
        let mut k = kernel(2, 0.0);
        k.join_node("a".into(), BTreeSet::new()).unwrap();
        k.join_node("b".into(), BTreeSet::new()).unwrap();
        k.schedule("a".into(), Note("wait".into()), 7).unwrap();
        k.step();
        k.step();
        assert_eq!(k.now(), Tick(7));
        k.transmit(&"a".into(), &"b".into(), Note("m".into())).unwrap();
        let recs = k.step();
        assert_eq!(recs[0].tick, Tick(9));
        assert!(matches!(recs[0].event, Event::Deliver { .. }));
    }

    #[test]
    fn unknown_destination_records_loss() {
        let mut k = kernel(0, 0.0);
        k.join_node("a".into(), BTreeSet::new()).unwrap();
        k.step();
        k.transmit(&"a".into(), &"zz".into(), Note("m".into())).unwrap();
        let recs = k.step();
        assert!(matches!(
            recs[0].event,
            Event::Lost { reason: LossReason::UnknownDestination, .. }
        ));
        assert_eq!(recs[0].node.as_str(), NET_NODE);
    }

    #[test]
    fn lifecycle_errors_and_rejoin() {
        let mut k = kernel(0, 0.0);
        k.join_node("a".into(), BTreeSet::new()).unwrap();
        assert!(matches!(k.join_node("a".into(), BTreeSet::new()), Err(KernelError::AlreadyJoined(_))));
        k.leave_node(&"a".into()).unwrap();
        assert!(matches!(k.leave_node(&"a".into()), Err(KernelError::NotAlive(_))));
        k.join_node("a".into(), ["x".to_string()].into()).unwrap();
        assert!(k.is_alive(&"a".into()));
        assert_eq!(k.node(&"a".into()).unwrap().hosted_agents.len(), 1);
        assert!(matches!(k.join_node("net".into(), BTreeSet::new()), Err(KernelError::InvalidNodeId(_))));
    }

    #[test]
    fn trace_line_format() {
        let mut k = kernel(0, 0.0);
        k.schedule("a".into(), Note("hi".into()), 0).unwrap();
        k.step();
        assert_eq!(k.trace(), "0 0 a note \"hi\"\n");
    }

    #[test]
    fn advance_only_over_idle_time() {
        let mut k = kernel(0, 0.0);
        k.schedule("a".into(), Note("x".into()), 4).unwrap();
        assert!(k.advance_to(Tick(4)));
        assert!(!k.advance_to(Tick(5)));
        k.step();
        assert!(!k.advance_to(Tick(3)));
        assert!(k.advance_to(Tick(9)));
        assert_eq!(k.now(), Tick(9));
    }
}
