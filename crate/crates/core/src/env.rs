//! Per-node virtual environment: state repository, perception, action and
//! communication services, and synchronization with peer nodes.
//!
//! The environment never talks to the kernel directly. Every externally
//! visible effect (local inbox delivery, transmissions to other nodes,
//! operations on the external environment, notes for the trace) is pushed
//! to an output queue the scenario driver drains after each call.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, ContentLanguage, Message};
use crate::fields::{age_priority, FieldConfig, TaskField, MIN_PRIORITY};
use crate::graph::{EdgeId, GraphPath, Hull, OperatingSpace, PathProjection, ProjectionStatus, SegmentGraph, Vertex};
use crate::kernel::{NodeId, Tick};
use crate::locking::{Claim, ClaimTable, LockMsg, Outgoing};
use crate::perception::Representation;
use crate::value::{Items, StateItems, Template, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Focus {
    pub name: String,
    pub params: Items,
}

impl Focus {
    pub fn new(name: impl Into<String>) -> Self {
        Focus { name: name.into(), params: Items::new() }
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.params.insert(name, value);
        self
    }

    /// Path focus: every route from `from` to `to` no longer than `max_dist`.
    pub fn paths(max_dist: f64, from: impl Into<Vertex>, to: impl Into<Vertex>) -> Self {
        Focus::new("paths").with("maxDist", max_dist).with("from", from.into()).with("to", to.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sense {
    pub agent_id: String,
    pub focus: Focus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub agent_id: String,
    pub name: String,
    pub params: Items,
}

impl Action {
    pub fn new(agent_id: impl Into<String>, name: impl Into<String>) -> Self {
        Action { agent_id: agent_id.into(), name: name.into(), params: Items::new() }
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.params.insert(name, value);
        self
    }
}

/// An action translated for the external environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operation {
    pub agent_id: String,
    pub name: String,
    pub params: Items,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: String,
    pub focus: Focus,
}

/// Stub for the world outside the virtual environment.
pub trait ExternalEnvironment: Send {
    fn observe(&mut self, obs: &Observation) -> Result<Representation, String>;
    /// Start an operation; its effect shows up in a later [`poll`](Self::poll).
    fn operate(&mut self, op: &Operation, now: Tick);
    /// Resource state that changed by `now`, per agent.
    fn poll(&mut self, now: Tick) -> Vec<(String, Items)>;
    /// Current resource state, for harness inspection.
    fn snapshot(&self) -> Items {
        Items::new()
    }
}

/// External environment with nothing attached.
#[derive(Debug, Default)]
pub struct NoExternal;

impl ExternalEnvironment for NoExternal {
    fn observe(&mut self, _: &Observation) -> Result<Representation, String> {
        Err("no external environment".into())
    }
    fn operate(&mut self, _: &Operation, _: Tick) {}
    fn poll(&mut self, _: Tick) -> Vec<(String, Items)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SyncKind {
    FieldSpread,
    FieldRemove,
    ClaimBroadcast,
    ClaimRelease,
    Membership,
    ResourceMirror,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SyncPayload {
    FieldSpread(TaskField),
    FieldRemove { task_id: String },
    Claim(LockMsg),
    Membership { node: NodeId, joined: bool, agents: Vec<AgentAddress> },
    ResourceMirror { agent: String, items: Items },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynchronizationUpdate {
    pub origin: NodeId,
    pub payload: SyncPayload,
}

impl SynchronizationUpdate {
    pub fn kind(&self) -> SyncKind {
        match &self.payload {
            SyncPayload::FieldSpread(_) => SyncKind::FieldSpread,
            SyncPayload::FieldRemove { .. } => SyncKind::FieldRemove,
            SyncPayload::Claim(LockMsg::Release { .. }) => SyncKind::ClaimRelease,
            SyncPayload::Claim(_) => SyncKind::ClaimBroadcast,
            SyncPayload::Membership { .. } => SyncKind::Membership,
            SyncPayload::ResourceMirror { .. } => SyncKind::ResourceMirror,
        }
    }
}

/// Data crossing the network between virtual environments, in wire form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Transmission {
    Message { wire: String, recipients: Vec<String> },
    Sync { wire: String },
}

impl Transmission {
    pub fn sync(update: &SynchronizationUpdate) -> Self {
        Transmission::Sync { wire: serde_json::to_string(update).expect("sync update serializes") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAddress {
    pub agent: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressEntry {
    pub node: NodeId,
    pub kind: String,
    pub position: Option<Vertex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum VeOutput {
    /// Put a message in a hosted agent's inbox now.
    Deliver { agent: String, message: Message },
    Transmit { to: NodeId, transmission: Transmission },
    Operation(Operation),
    /// A projection owned by `agent` became locked.
    Locked { agent: String, projection_id: u64 },
    Note { kind: String, detail: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum VeError {
    #[error("unknown focus {0}")]
    UnknownFocus(String),
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("action {0} rejected: {1}")]
    Rejected(String, String),
    #[error("perception failed: {0}")]
    Perception(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("agent {0} is not hosted here")]
    NotHosted(String),
}

pub type TemplateFn = fn(&Sense) -> Template;
pub type GenerateFn = fn(&Sense, &StateItems, &VirtualEnvironment) -> Result<Representation, String>;
pub type VirtualActionFn = fn(&mut VirtualEnvironment, &Action) -> Result<(), String>;
pub type ExternalActionFn = fn(&Action, &VirtualEnvironment) -> Result<Operation, String>;

#[derive(Clone, Copy)]
pub enum PerceptionType {
    Virtual { template: TemplateFn, generate: GenerateFn },
    External,
}

#[derive(Clone, Copy)]
pub enum ActionType {
    Virtual(VirtualActionFn),
    External(ExternalActionFn),
}

/// Periodic, locally initiated synchronization duties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncRule {
    /// Raise the priority of owned, unassigned fields and re-spread them.
    FieldAging,
    /// Mirror external resource state locally and to every peer.
    ExternalMirror,
}

#[derive(Debug, Clone, PartialEq)]
struct OwnedField {
    base: TaskField,
    emitted: Tick,
}

pub struct VirtualEnvironment {
    node: NodeId,
    ordinal: u64,
    graph: Arc<SegmentGraph>,
    language: Arc<ContentLanguage>,
    field_cfg: FieldConfig,
    now: Tick,
    state: StateItems,
    perception_types: BTreeMap<String, PerceptionType>,
    action_types: BTreeMap<String, ActionType>,
    scope_kinds: BTreeMap<String, String>,
    sync_rules: Vec<SyncRule>,
    hosted: BTreeSet<String>,
    addresses: BTreeMap<String, AddressEntry>,
    peers: BTreeSet<NodeId>,
    claims: ClaimTable,
    projection_owner: BTreeMap<u64, String>,
    next_projection: u64,
    owned_fields: BTreeMap<String, OwnedField>,
    delivered: BTreeSet<(u64, String)>,
    external: Box<dyn ExternalEnvironment>,
    outputs: Vec<VeOutput>,
}

impl fmt::Debug for VirtualEnvironment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VirtualEnvironment")
            .field("node", &self.node)
            .field("state", &self.state)
            .field("hosted", &self.hosted)
            .finish_non_exhaustive()
    }
}

pub fn field_item(task_id: &str) -> String {
    format!("field:{task_id}")
}

pub fn projection_item(agent: &str, id: u64) -> String {
    format!("projection:{agent}:{id}")
}

pub fn mirror_item(name: &str, agent: &str) -> String {
    format!("{name}:{agent}")
}

impl VirtualEnvironment {
    /// `ordinal` makes projection ids unique across nodes.
    pub fn new(node: NodeId, ordinal: u64, graph: Arc<SegmentGraph>, language: Arc<ContentLanguage>) -> Self {
        VirtualEnvironment {
            claims: ClaimTable::new(node.clone()),
            node,
            ordinal,
            graph,
            language,
            field_cfg: FieldConfig::default(),
            now: Tick(0),
            state: StateItems::new(),
            perception_types: BTreeMap::new(),
            action_types: BTreeMap::new(),
            scope_kinds: BTreeMap::new(),
            sync_rules: Vec::new(),
            hosted: BTreeSet::new(),
            addresses: BTreeMap::new(),
            peers: BTreeSet::new(),
            projection_owner: BTreeMap::new(),
            next_projection: 0,
            owned_fields: BTreeMap::new(),
            delivered: BTreeSet::new(),
            external: Box::new(NoExternal),
            outputs: Vec::new(),
        }
    }

    /// Environment with the standard foci and actions of both scenarios.
    pub fn with_standard_types(node: NodeId, ordinal: u64, graph: Arc<SegmentGraph>, language: Arc<ContentLanguage>) -> Self {
        let mut ve = VirtualEnvironment::new(node, ordinal, graph, language);
        crate::env_types::register_standard(&mut ve);
        ve
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn graph(&self) -> &SegmentGraph {
        &self.graph
    }

    pub fn language(&self) -> &ContentLanguage {
        &self.language
    }

    pub fn field_config(&self) -> &FieldConfig {
        &self.field_cfg
    }

    pub fn set_field_config(&mut self, cfg: FieldConfig) {
        self.field_cfg = cfg;
    }

    pub fn set_external(&mut self, external: Box<dyn ExternalEnvironment>) {
        self.external = external;
    }

    pub fn external_snapshot(&self) -> Items {
        self.external.snapshot()
    }

    pub fn set_now(&mut self, now: Tick) {
        self.now = now;
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn register_focus(&mut self, name: &str, kind: PerceptionType) {
        self.perception_types.insert(name.to_string(), kind);
    }

    pub fn register_action(&mut self, name: &str, kind: ActionType) {
        self.action_types.insert(name.to_string(), kind);
    }

    /// Agents of `kind` are the audience of scope receivers in `protocol`.
    pub fn register_scope_kind(&mut self, protocol: &str, kind: &str) {
        self.scope_kinds.insert(protocol.to_string(), kind.to_string());
    }

    pub fn add_sync_rule(&mut self, rule: SyncRule) {
        if !self.sync_rules.contains(&rule) {
            self.sync_rules.push(rule);
        }
    }

    pub fn is_virtual_focus(&self, name: &str) -> Option<bool> {
        self.perception_types.get(name).map(|k| matches!(k, PerceptionType::Virtual { .. }))
    }

    pub fn is_virtual_action(&self, name: &str) -> Option<bool> {
        self.action_types.get(name).map(|k| matches!(k, ActionType::Virtual(_)))
    }

    pub fn host(&mut self, agent: &str, kind: &str) {
        self.hosted.insert(agent.to_string());
        let entry = self.addresses.entry(agent.to_string()).or_insert(AddressEntry {
            node: self.node.clone(),
            kind: kind.to_string(),
            position: None,
        });
        entry.node = self.node.clone();
    }

    pub fn hosts(&self, agent: &str) -> bool {
        self.hosted.contains(agent)
    }

    pub fn hosted(&self) -> &BTreeSet<String> {
        &self.hosted
    }

    pub fn addresses(&self) -> &BTreeMap<String, AddressEntry> {
        &self.addresses
    }

    pub fn peers(&self) -> &BTreeSet<NodeId> {
        &self.peers
    }

    pub fn claims(&self) -> &ClaimTable {
        &self.claims
    }

    pub fn drain_outputs(&mut self) -> Vec<VeOutput> {
        std::mem::take(&mut self.outputs)
    }

    fn note(&mut self, kind: &str, detail: impl Into<String>) {
        self.outputs.push(VeOutput::Note { kind: kind.to_string(), detail: detail.into() });
    }

    fn send_sync(&mut self, to: &NodeId, payload: SyncPayload) {
        let update = SynchronizationUpdate { origin: self.node.clone(), payload };
        self.outputs.push(VeOutput::Transmit { to: to.clone(), transmission: Transmission::sync(&update) });
    }

    fn broadcast_sync(&mut self, payload: SyncPayload) {
        let peers: Vec<NodeId> = self.peers.iter().cloned().collect();
        for p in peers {
            self.send_sync(&p, payload.clone());
        }
    }

    // ---- state repository -------------------------------------------------

    pub fn state_read(&self, template: &Template) -> StateItems {
        self.state.read(template)
    }

    pub fn state_write(&mut self, items: StateItems) {
        self.state.write(items);
    }

    pub fn state(&self) -> &StateItems {
        &self.state
    }

    /// Fields mirrored in this environment.
    pub fn fields(&self) -> Vec<TaskField> {
        self.state
            .with_prefix("field:")
            .filter_map(|(_, v)| match v {
                Value::Field(f) => Some(f.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn position_of(&self, agent: &str) -> Option<&Vertex> {
        self.addresses.get(agent).and_then(|a| a.position.as_ref())
    }

    // ---- perception -------------------------------------------------------

    pub fn sense(&mut self, request: &Sense) -> Result<Representation, VeError> {
        let kind = *self
            .perception_types
            .get(&request.focus.name)
            .ok_or_else(|| VeError::UnknownFocus(request.focus.name.clone()))?;
        match kind {
            PerceptionType::Virtual { template, generate } => {
                let items = self.state_read(&template(request));
                generate(request, &items, self).map_err(VeError::Perception)
            }
            PerceptionType::External => {
                let obs = Observation { agent_id: request.agent_id.clone(), focus: request.focus.clone() };
                self.external.observe(&obs).map_err(VeError::Perception)
            }
        }
    }

    // ---- actions ----------------------------------------------------------

    pub fn act(&mut self, action: &Action) -> Result<(), VeError> {
        let kind = *self
            .action_types
            .get(&action.name)
            .ok_or_else(|| VeError::UnknownAction(action.name.clone()))?;
        match kind {
            ActionType::Virtual(apply) => {
                apply(self, action).map_err(|r| VeError::Rejected(action.name.clone(), r))
            }
            ActionType::External(translate) => {
                let op = translate(action, self).map_err(|r| VeError::Rejected(action.name.clone(), r))?;
                self.external.operate(&op, self.now);
                self.outputs.push(VeOutput::Operation(op));
                Ok(())
            }
        }
    }

    /// Record a new path projection and submit its claim.
    pub fn project(&mut self, agent: &str, priority: u8, hull: Hull, path: &GraphPath) -> Result<u64, String> {
        let edges = self
            .graph
            .path_edges(path)
            .ok_or_else(|| format!("path {path} uses nonexistent segments"))?;
        if let Some(bad) = hull.segments.iter().find(|s| self.graph.edge(**s).is_none()) {
            return Err(format!("hull segment {bad} does not exist"));
        }
        if edges.is_empty() && hull.segments.is_empty() {
            return Err("projection covers no segments".into());
        }
        let id = (self.next_projection << 16) | (self.ordinal & 0xffff);
        self.next_projection += 1;
        let projection = PathProjection {
            id,
            priority: priority.max(MIN_PRIORITY),
            hull,
            projection: edges,
            status: ProjectionStatus::Requested,
        };
        let claim = Claim {
            projection_id: id,
            priority: projection.priority,
            segments: projection.segments(),
            requester: self.node.clone(),
            claim_tick: self.now,
        };
        self.state.insert(projection_item(agent, id), Value::Projection(projection));
        self.projection_owner.insert(id, agent.to_string());
        let (out, granted) = self.claims.submit(claim).map_err(|e| e.to_string())?;
        self.route_lock(out);
        self.apply_grants(granted);
        Ok(id)
    }

    /// Release segments of a locked projection.
    pub fn clear_projection(&mut self, projection_id: u64, segments: &BTreeSet<EdgeId>) -> Result<(), String> {
        let out = self.claims.clear_segments(projection_id, segments).map_err(|e| e.to_string())?;
        self.route_lock(out);
        self.trim_projection(projection_id, segments, false);
        Ok(())
    }

    /// Drop a projection whether or not it is locked.
    pub fn withdraw_projection(&mut self, projection_id: u64) -> Result<(), String> {
        let out = self.claims.withdraw(projection_id).map_err(|e| e.to_string())?;
        self.route_lock(out);
        self.trim_projection(projection_id, &BTreeSet::new(), true);
        Ok(())
    }

    fn trim_projection(&mut self, id: u64, segments: &BTreeSet<EdgeId>, all: bool) {
        let Some(agent) = self.projection_owner.get(&id).cloned() else { return };
        let key = projection_item(&agent, id);
        let mut gone = all;
        if let Some(Value::Projection(p)) = self.state.get(&key).cloned() {
            let mut p = p;
            p.projection.retain(|s| !segments.contains(s));
            p.hull.segments.retain(|s| !segments.contains(s));
            gone |= p.segments().is_empty();
            if !gone {
                self.state.insert(key.clone(), Value::Projection(p));
            }
        }
        if gone {
            self.state.remove(&key);
            self.projection_owner.remove(&id);
        }
    }

    /// Projections owned by `agent`, in id order.
    pub fn projections_of(&self, agent: &str) -> Vec<PathProjection> {
        let prefix = format!("projection:{agent}:");
        let mut out: Vec<PathProjection> = self
            .state
            .with_prefix(&prefix)
            .filter_map(|(_, v)| match v {
                Value::Projection(p) => Some(p.clone()),
                _ => None,
            })
            .collect();
        out.sort_by_key(|p| p.id);
        out
    }

    pub fn operating_space(&self, agent: &str) -> OperatingSpace {
        let mut os = OperatingSpace::default();
        for p in self.projections_of(agent) {
            let segs: Vec<EdgeId> = p.segments().into_iter().collect();
            match p.status {
                ProjectionStatus::Locked => {
                    for s in segs {
                        if !os.locked.contains(&s) {
                            os.locked.push(s);
                        }
                    }
                }
                ProjectionStatus::Requested => os.request(&segs),
            }
        }
        // Segments both requested and locked count as locked.
        let locked: BTreeSet<EdgeId> = os.locked.iter().copied().collect();
        os.requested.retain(|s| !locked.contains(s));
        os
    }

    fn route_lock(&mut self, out: Outgoing) {
        for (to, msg) in out {
            self.send_sync(&to, SyncPayload::Claim(msg));
        }
    }

    fn apply_grants(&mut self, granted: Vec<u64>) {
        for id in granted {
            let Some(agent) = self.projection_owner.get(&id).cloned() else { continue };
            let key = projection_item(&agent, id);
            if let Some(Value::Projection(p)) = self.state.get(&key).cloned() {
                let mut p = p;
                p.lock();
                self.state.insert(key, Value::Projection(p));
            }
            self.outputs.push(VeOutput::Locked { agent, projection_id: id });
        }
    }

    /// Emit a task field owned by this node and spread it to every peer.
    pub fn emit_field(&mut self, field: TaskField) {
        let task = field.task_id.clone();
        self.owned_fields.insert(task.clone(), OwnedField { base: field.clone(), emitted: self.now });
        self.state.insert(field_item(&task), Value::Field(field.clone()));
        self.broadcast_sync(SyncPayload::FieldSpread(field));
    }

    /// Remove a field everywhere. Unknown tasks are a no-op.
    pub fn remove_field(&mut self, task_id: &str) {
        let owned = self.owned_fields.remove(task_id).is_some();
        let present = self.state.remove(&field_item(task_id)).is_some();
        if owned || present {
            self.broadcast_sync(SyncPayload::FieldRemove { task_id: task_id.to_string() });
        }
    }

    // ---- communication ----------------------------------------------------

    /// Agents a message is addressed to, with their hosting nodes.
    pub fn resolve_receivers(&self, msg: &Message) -> Vec<(String, NodeId)> {
        let audience = self.scope_kinds.get(&msg.protocol);
        let of_kind = |a: &AddressEntry| audience.is_none_or(|k| &a.kind == k);
        let r = msg.receiver.as_str();
        if r == "all" {
            return self
                .addresses
                .iter()
                .filter(|(id, a)| *id != &msg.sender && of_kind(a))
                .map(|(id, a)| (id.clone(), a.node.clone()))
                .collect();
        }
        if let Some(scope) = parse_scope(r) {
            let Some(center) = self.position_of(&msg.sender) else { return Vec::new() };
            let Ok(dist) = self.graph.distances_from(center) else { return Vec::new() };
            return self
                .addresses
                .iter()
                .filter(|(id, a)| *id != &msg.sender && of_kind(a))
                .filter(|(_, a)| a.position.as_ref().and_then(|p| dist.get(p)).is_some_and(|d| *d <= scope))
                .map(|(id, a)| (id.clone(), a.node.clone()))
                .collect();
        }
        self.addresses
            .get(r)
            .map(|a| vec![(r.to_string(), a.node.clone())])
            .unwrap_or_default()
    }

    pub fn send_message(&mut self, msg: Message) -> Result<(), VeError> {
        self.language.validate(&msg)?;
        let receivers = self.resolve_receivers(&msg);
        if receivers.is_empty() && parse_scope(&msg.receiver).is_none() && msg.receiver != "all" {
            self.note("lostTransmission", format!("no address for {} (message {})", msg.receiver, msg.id));
            return Ok(());
        }
        let mut remote: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
        for (agent, node) in receivers {
            if node == self.node {
                self.deliver_local(&agent, &msg);
            } else {
                remote.entry(node).or_default().push(agent);
            }
        }
        let wire = msg.to_wire();
        for (node, recipients) in remote {
            self.outputs.push(VeOutput::Transmit {
                to: node,
                transmission: Transmission::Message { wire: wire.clone(), recipients },
            });
        }
        Ok(())
    }

    fn deliver_local(&mut self, agent: &str, msg: &Message) {
        if !self.hosted.contains(agent) {
            self.note("lostTransmission", format!("{agent} not hosted on {}", self.node));
            return;
        }
        if self.delivered.insert((msg.id, agent.to_string())) {
            self.outputs.push(VeOutput::Deliver { agent: agent.to_string(), message: msg.clone() });
        }
    }

    /// Handle a transmission received from another node.
    pub fn deliver_transmission(&mut self, from: &NodeId, t: &Transmission) {
        match t {
            Transmission::Message { wire, recipients } => {
                let msg = match Message::from_wire(wire).and_then(|m| self.language.validate(&m).map(|_| m)) {
                    Ok(m) => m,
                    Err(e) => return self.note("decodeError", e.to_string()),
                };
                for r in recipients {
                    self.deliver_local(r, &msg);
                }
            }
            Transmission::Sync { wire } => match serde_json::from_str::<SynchronizationUpdate>(wire) {
                Ok(update) => self.apply_sync_update(update),
                Err(e) => self.note("syncError", format!("from {from}: {e}")),
            },
        }
    }

    // ---- synchronization --------------------------------------------------

    /// Run every registered locally initiated synchronization.
    pub fn synchronize_local(&mut self) {
        for rule in self.sync_rules.clone() {
            match rule {
                SyncRule::FieldAging => self.age_fields(),
                SyncRule::ExternalMirror => {
                    let now = self.now;
                    for (agent, items) in self.external.poll(now) {
                        self.mirror(&agent, &items);
                        self.broadcast_sync(SyncPayload::ResourceMirror { agent, items });
                    }
                }
            }
        }
    }

    fn age_fields(&mut self) {
        let owned: Vec<(String, OwnedField)> =
            self.owned_fields.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (task, of) in owned {
            let elapsed = self.now.0.saturating_sub(of.emitted.0);
            let aged = age_priority(&of.base, elapsed, &self.field_cfg);
            let current = match self.state.get(&field_item(&task)) {
                Some(Value::Field(f)) => f.priority(),
                _ => of.base.priority(),
            };
            if aged.priority() != current {
                self.state.insert(field_item(&task), Value::Field(aged.clone()));
                self.broadcast_sync(SyncPayload::FieldSpread(aged));
            }
        }
    }

    fn mirror(&mut self, agent: &str, items: &Items) {
        for (name, v) in items.iter() {
            self.state.insert(mirror_item(name, agent), v.clone());
        }
        if let Some(pos) = items.get("position").and_then(Value::as_node) {
            if let Some(a) = self.addresses.get_mut(agent) {
                a.position = Some(pos.clone());
            }
        }
    }

    /// Write resource state for a hosted agent and mirror it to peers.
    pub fn publish_resource(&mut self, agent: &str, items: Items) {
        self.mirror(agent, &items);
        self.broadcast_sync(SyncPayload::ResourceMirror { agent: agent.to_string(), items });
    }

    pub fn apply_sync_update(&mut self, update: SynchronizationUpdate) {
        let origin = update.origin.clone();
        match update.payload {
            SyncPayload::FieldSpread(field) => {
                self.state.insert(field_item(&field.task_id), Value::Field(field));
            }
            SyncPayload::FieldRemove { task_id } => {
                self.state.remove(&field_item(&task_id));
            }
            SyncPayload::Claim(msg) => {
                let (out, granted) = self.claims.handle(&origin, msg);
                self.route_lock(out);
                self.apply_grants(granted);
            }
            SyncPayload::Membership { node, joined, agents } => self.on_membership(&node, joined, &agents),
            SyncPayload::ResourceMirror { agent, items } => self.mirror(&agent, &items),
        }
    }

    /// Observe a node joining or leaving.
    pub fn on_membership(&mut self, node: &NodeId, joined: bool, agents: &[AgentAddress]) {
        if joined {
            for a in agents {
                let position = self.addresses.get(&a.agent).and_then(|e| e.position.clone());
                self.addresses
                    .insert(a.agent.clone(), AddressEntry { node: node.clone(), kind: a.kind.clone(), position });
            }
            if node == &self.node {
                return;
            }
            self.peers.insert(node.clone());
            self.claims.peer_joined(node.clone());
            // Bring the newcomer up to date with what this node owns.
            let fields: Vec<TaskField> = self
                .owned_fields
                .keys()
                .filter_map(|t| match self.state.get(&field_item(t)) {
                    Some(Value::Field(f)) => Some(f.clone()),
                    _ => None,
                })
                .collect();
            for f in fields {
                self.send_sync(node, SyncPayload::FieldSpread(f));
            }
            let hosted: Vec<String> = self.hosted.iter().cloned().collect();
            for agent in hosted {
                let prefix_items: Items = self
                    .state
                    .iter()
                    .filter_map(|(k, v)| k.strip_suffix(&format!(":{agent}")).map(|n| (n.to_string(), v.clone())))
                    .filter(|(n, _)| !n.contains(':'))
                    .collect();
                if !prefix_items.is_empty() {
                    self.send_sync(node, SyncPayload::ResourceMirror { agent, items: prefix_items });
                }
            }
        } else {
            self.peers.remove(node);
            self.addresses.retain(|_, a| &a.node != node);
            let granted = self.claims.peer_left(node);
            self.apply_grants(granted);
        }
    }
}

/// Parse a path-distance scope such as `20m`.
pub fn parse_scope(receiver: &str) -> Option<f64> {
    let num = receiver.strip_suffix('m')?;
    let x: f64 = num.parse().ok()?;
    (x.is_finite() && x >= 0.0).then_some(x)
}
