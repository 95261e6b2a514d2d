//! AGV warehouse: one transport agent per task, AGV agents driving a
//! simulated body, task assignment through fields or DynCNET, and
//! collision avoidance through locked path projections.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, Conversation, Outbound, PerceptionRequest, ProtocolHandler};
use crate::codec::{ContentLanguage, Domain, MessageData};
use crate::dyncnet::{self, DynConfig, InitiatorHandler, InitiatorPhase, ParticipantEvent, ParticipantHandler, ParticipantPhase, TaskInfo};
use crate::env::{Action, ExternalEnvironment, Focus, Observation, Operation, Sense, SyncRule};
use crate::fields::{gradient_step, FieldConfig, TaskField};
use crate::freeflow::{refine_action, select_action, ActionSelector, Refinement, SituatedCommitment, TreeBuilder};
use crate::graph::{EdgeId, SegmentGraph, Vertex};
use crate::kernel::{NetworkConfig, NodeId, Tick};
use crate::perception::{Description, Filter, Representation};
use crate::value::{Items, Knowledge, Value};

use super::config::{AssignmentMode, MembershipAction, ScenarioConfig, TaskSpec};
use super::runtime::{communicate, Ctx, Unit, World};

pub const FIELD_ASSIGN: &str = "FieldAssign";
pub const TRANSPORT: &str = "Transport";
pub const AGV_KIND: &str = "agv";
pub const TRANSPORT_KIND: &str = "transport";
/// Node hosting every transport agent.
pub const BASE_NODE: &str = "base";

pub fn register_schemas(lang: &mut ContentLanguage) {
    dyncnet::register_schema(lang);
    let task = ("taskId", Domain::Ident);
    lang.register(
        FIELD_ASSIGN,
        "assign",
        &[task.clone(), ("pickup", Domain::Node), ("dropoff", Domain::Node), ("priority", Domain::Priority)],
    );
    lang.register(FIELD_ASSIGN, "accept", &[task.clone()]);
    lang.register(FIELD_ASSIGN, "decline", &[task.clone()]);
    lang.register(TRANSPORT, "details", &[task.clone(), ("dropoff", Domain::Node), ("priority", Domain::Priority)]);
    lang.register(TRANSPORT, "done", &[task]);
}

pub fn node_of_agent(agent: &str) -> NodeId {
    NodeId::new(format!("{agent}-node"))
}

/// Handler for request/reply protocols whose logic lives in the agent.
#[derive(Debug, Clone)]
pub struct Mailbox {
    protocol: &'static str,
    openers: &'static [&'static str],
    finals: &'static [&'static str],
    pending: VecDeque<Outbound>,
    received: VecDeque<MessageData>,
}

impl Mailbox {
    pub fn new(protocol: &'static str, openers: &'static [&'static str], finals: &'static [&'static str]) -> Self {
        Mailbox { protocol, openers, finals, pending: VecDeque::new(), received: VecDeque::new() }
    }

    pub fn send(&mut self, conversation: u64, to: &str, performative: &str, content: Vec<(&'static str, Value)>) {
        self.pending.push_back(Outbound {
            conversation,
            receiver: to.to_string(),
            performative: performative.to_string(),
            content,
        });
    }

    pub fn take(&mut self) -> Option<MessageData> {
        self.received.pop_front()
    }
}

impl ProtocolHandler for Mailbox {
    fn protocol(&self) -> &str {
        self.protocol
    }

    fn opens(&self, performative: &str) -> bool {
        self.openers.contains(&performative)
    }

    fn incoming(&mut self, d: &MessageData, _: &Knowledge, _: Tick) -> Knowledge {
        self.received.push_back(d.clone());
        Knowledge::new()
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        self.pending.pop_front()
    }

    fn is_final(&self, c: &Conversation) -> bool {
        !self.pending.iter().any(|o| o.conversation == c.id)
            && c.history.last().is_some_and(|m| self.finals.contains(&m.performative.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    /// Meters per tick.
    pub speed: f64,
    pub handle_ticks: u64,
    pub charge_ticks: u64,
}

impl Default for BodyParams {
    fn default() -> Self {
        BodyParams { speed: 5.0, handle_ticks: 2, charge_ticks: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BodyOp {
    Move(Vertex),
    Pick,
    Drop,
    Charge,
}

/// Simulated AGV hardware behind the virtual environment.
#[derive(Debug, Clone)]
pub struct AgvBody {
    agent: String,
    graph: Arc<SegmentGraph>,
    params: BodyParams,
    position: Vertex,
    loaded: bool,
    battery: i64,
    op: Option<(BodyOp, Tick)>,
    dirty: bool,
}

impl AgvBody {
    pub fn new(agent: &str, graph: Arc<SegmentGraph>, params: BodyParams, position: Vertex) -> Self {
        AgvBody { agent: agent.to_string(), graph, params, position, loaded: false, battery: 100, op: None, dirty: true }
    }

    fn items(&self) -> Items {
        [
            ("position", Value::Node(self.position.clone())),
            ("loaded", Value::Bool(self.loaded)),
            ("busy", Value::Bool(self.op.is_some())),
            ("battery", Value::Int(self.battery)),
        ]
        .into_iter()
        .collect()
    }
}

impl ExternalEnvironment for AgvBody {
    fn observe(&mut self, _: &Observation) -> Result<Representation, String> {
        Ok(Representation(self.items()))
    }

    fn operate(&mut self, op: &Operation, now: Tick) {
        if op.agent_id != self.agent || self.op.is_some() {
            return;
        }
        let at = |name: &str| op.params.get(name).and_then(Value::as_node).cloned();
        let started = match op.name.as_str() {
            "moveTo" => {
                let Some(to) = at("to") else { return };
                let Some(e) = self.graph.edge_between(&self.position, &to).and_then(|e| self.graph.edge(e)) else {
                    return;
                };
                let ticks = ((e.length / self.params.speed).ceil() as u64).max(1);
                Some((BodyOp::Move(to), now + ticks))
            }
            "moveToAndPick" if at("node").as_ref() == Some(&self.position) && !self.loaded => {
                Some((BodyOp::Pick, now + self.params.handle_ticks))
            }
            "moveToAndDrop" if at("node").as_ref() == Some(&self.position) && self.loaded => {
                Some((BodyOp::Drop, now + self.params.handle_ticks))
            }
            "charge" => Some((BodyOp::Charge, now + self.params.charge_ticks)),
            _ => None,
        };
        if started.is_some() {
            self.op = started;
            self.dirty = true;
        }
    }

    fn poll(&mut self, now: Tick) -> Vec<(String, Items)> {
        if let Some((op, until)) = self.op.clone() {
            if now >= until {
                match op {
                    BodyOp::Move(to) => {
                        self.position = to;
                        self.battery = (self.battery - 1).max(0);
                    }
                    BodyOp::Pick => self.loaded = true,
                    BodyOp::Drop => self.loaded = false,
                    BodyOp::Charge => self.battery = 100,
                }
                self.op = None;
                self.dirty = true;
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ToPickup,
    Picking,
    ToDrop,
    Dropping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgvTask {
    pub id: String,
    pub initiator: String,
    pub pickup: Vertex,
    pub dropoff: Option<Vertex>,
    pub priority: u8,
    pub stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgvStats {
    pub lock_wait_ticks: u64,
    pub moves: u64,
    pub projections: BTreeSet<u64>,
}

/// Roles of an AGV: working, parking and charging, with the work
/// commitment lifting the working role while a task is held.
pub fn agv_selector() -> ActionSelector {
    let flag = |name: &'static str, v: f64| move |k: &Knowledge| if truth(k, name) { v } else { 0.0 };
    let working = TreeBuilder::new("working", 1.0)
        .internal(1, "working")
        .internal(2, "toPickup")
        .internal(3, "toDrop")
        .action(4, "moveToPickup")
        .action(5, "pick")
        .action(6, "moveToDrop")
        .action(7, "drop")
        .edge(1, 2, 0.5)
        .edge(1, 3, 0.5)
        .edge(2, 4, 0.5)
        .edge(2, 5, 0.5)
        .edge(3, 6, 0.5)
        .edge(3, 7, 0.5)
        .stimulus("needPickup", 2, flag("needPickup", 2.0))
        .stimulus("needDrop", 3, flag("needDrop", 2.0))
        .stimulus("awayFromPickup", 4, flag("awayFromPickup", 2.0))
        .stimulus("atPickup", 5, flag("readyToPick", 2.0))
        .stimulus("awayFromDrop", 6, flag("awayFromDrop", 2.0))
        .stimulus("atDrop", 7, flag("readyToDrop", 2.0))
        .build()
        .expect("working role is well formed");
    let parking = TreeBuilder::new("parking", 2.0)
        .internal(10, "parking")
        .action(11, "rest")
        .action(12, "park")
        .action(13, "followGradient")
        .edge(10, 11, 0.5)
        .edge(10, 12, 0.5)
        .edge(10, 13, 0.5)
        .stimulus("awayFromPark", 12, flag("goPark", 2.0))
        .stimulus("fieldNearby", 13, flag("followField", 2.0))
        .build()
        .expect("parking role is well formed");
    let charging = TreeBuilder::new("charging", 1.0)
        .internal(20, "charging")
        .action(21, "charge")
        .edge(20, 21, 0.5)
        .stimulus("batteryLow", 21, flag("needCharge", 4.0))
        .build()
        .expect("charging role is well formed");
    let work = SituatedCommitment::new("work", &["parking"], "working", |k: &Knowledge| truth(k, "hasTask"));
    ActionSelector::new(vec![working, parking, charging], vec![work]).expect("roles are consistent")
}

fn truth(k: &Knowledge, name: &str) -> bool {
    k.get(name).and_then(Value::as_bool).unwrap_or(false)
}

pub struct AgvAgent {
    agent: Agent,
    mode: AssignmentMode,
    graph: Arc<SegmentGraph>,
    field_cfg: FieldConfig,
    selector: ActionSelector,
    participant: ParticipantHandler,
    fields_mb: Mailbox,
    transport_mb: Mailbox,
    task: Option<AgvTask>,
    park: Vertex,
    errands: VecDeque<Vertex>,
    errand_cutoff: u64,
    projection: Option<(u64, Vertex)>,
    moving: Option<(u64, EdgeId, Vertex)>,
    available: Option<bool>,
    pub stats: AgvStats,
    pub completed: Vec<String>,
    pub last_selection: Option<String>,
}

impl AgvAgent {
    pub fn new(
        id: &str,
        ordinal: u64,
        mode: AssignmentMode,
        graph: Arc<SegmentGraph>,
        dyn_cfg: DynConfig,
        field_cfg: FieldConfig,
        park: Vertex,
    ) -> Self {
        let mut agent = Agent::new(id, AGV_KIND, ordinal);
        for item in ["position", "loaded", "busy", "battery", "fields", "paths", "operatingSpace"] {
            agent.add_description(Description::passthrough(item, &[item]));
        }
        AgvAgent {
            agent,
            mode,
            participant: ParticipantHandler::new(graph.clone(), dyn_cfg),
            graph,
            field_cfg,
            selector: agv_selector(),
            fields_mb: Mailbox::new(FIELD_ASSIGN, &["assign"], &["accept", "decline"]),
            transport_mb: Mailbox::new(TRANSPORT, &["details"], &["details", "done"]),
            task: None,
            park,
            errands: VecDeque::new(),
            errand_cutoff: u64::MAX,
            projection: None,
            moving: None,
            available: None,
            stats: AgvStats::default(),
            completed: Vec::new(),
            last_selection: None,
        }
    }

    /// Park locations to visit one after another once idle. No new
    /// errand starts at or after tick `cutoff`.
    pub fn with_errands(mut self, errands: impl IntoIterator<Item = Vertex>, cutoff: u64) -> Self {
        self.errands = errands.into_iter().collect();
        self.errand_cutoff = cutoff;
        if let Some(first) = self.errands.pop_front() {
            self.park = first;
        }
        self
    }

    pub fn id(&self) -> &str {
        self.agent.id()
    }

    pub fn task(&self) -> Option<&AgvTask> {
        self.task.as_ref()
    }

    pub fn participant(&self) -> &ParticipantHandler {
        &self.participant
    }

    pub fn position(&self) -> Option<&Vertex> {
        self.agent.knowledge().get("position").and_then(Value::as_node)
    }

    pub fn errands_left(&self) -> usize {
        self.errands.len()
    }

    pub fn park_location(&self) -> &Vertex {
        &self.park
    }

    fn perceive(&mut self, ctx: &mut Ctx, id: &str, focus: Focus) {
        let n = self.agent.perceive(&PerceptionRequest::new(id, focus), ctx.ve);
        if let Err(e) = n.outcome {
            self.agent.event("perceptionFailed", format!("{id}: {e}"));
        }
    }

    fn act(&mut self, ctx: &mut Ctx, action: Action) -> bool {
        match ctx.ve.act(&action) {
            Ok(()) => true,
            Err(e) => {
                self.agent.event("actionFailed", e.to_string());
                false
            }
        }
    }

    fn sync_dyncnet_task(&mut self) {
        let st = self.participant.state();
        match (st.phase, &st.provisional_task) {
            (ParticipantPhase::Intentional | ParticipantPhase::Bound, Some(pt)) => {
                if self.task.as_ref().map(|t| &t.id) != Some(&pt.task_id) {
                    if let Some(pickup) = self.participant.task_location().cloned() {
                        self.task = Some(AgvTask {
                            id: pt.task_id.clone(),
                            initiator: pt.initiator.clone(),
                            pickup,
                            dropoff: None,
                            priority: 1,
                            stage: Stage::ToPickup,
                        });
                    }
                }
            }
            _ => {
                if self.task.as_ref().is_some_and(|t| t.stage == Stage::ToPickup) {
                    self.task = None;
                }
            }
        }
    }

    fn handle_mail(&mut self, loaded: bool) {
        while let Some(d) = self.fields_mb.take() {
            if d.performative != "assign" {
                continue;
            }
            let task_id = d.text("taskId").unwrap_or_default().to_string();
            let reply = vec![("taskId", Value::Text(task_id.clone()))];
            let free = self.task.is_none() && !loaded;
            if free {
                let node = |n: &str| d.field(n).and_then(Value::as_node).cloned();
                if let (Some(pickup), Some(dropoff)) = (node("pickup"), node("dropoff")) {
                    self.task = Some(AgvTask {
                        id: task_id,
                        initiator: d.sender.clone(),
                        pickup,
                        dropoff: Some(dropoff),
                        priority: d.field("priority").and_then(Value::as_int).unwrap_or(1).clamp(1, 5) as u8,
                        stage: Stage::ToPickup,
                    });
                    self.fields_mb.send(d.conversation, &d.sender, "accept", reply);
                    continue;
                }
            }
            self.fields_mb.send(d.conversation, &d.sender, "decline", reply);
        }
        while let Some(d) = self.transport_mb.take() {
            if d.performative != "details" {
                continue;
            }
            if let Some(t) = self.task.as_mut().filter(|t| Some(t.id.as_str()) == d.text("taskId")) {
                t.dropoff = d.field("dropoff").and_then(Value::as_node).cloned();
                t.priority = d.field("priority").and_then(Value::as_int).unwrap_or(1).clamp(1, 5) as u8;
            }
        }
    }

    fn flags(&self, position: &Vertex, loaded: bool, battery: i64, fields_present: bool) -> Knowledge {
        let t = self.task.as_ref();
        let has_task = t.is_some();
        let at_pickup = t.is_some_and(|t| &t.pickup == position);
        let dropoff = t.and_then(|t| t.dropoff.as_ref());
        let at_drop = dropoff == Some(position);
        let idle = !has_task && !loaded;
        let follow = idle && fields_present && self.mode == AssignmentMode::Fields;
        [
            ("hasTask", has_task),
            ("needPickup", has_task && !loaded),
            ("needDrop", has_task && loaded),
            ("awayFromPickup", has_task && !loaded && !at_pickup),
            ("readyToPick", has_task && !loaded && at_pickup),
            ("awayFromDrop", loaded && dropoff.is_some() && !at_drop),
            ("readyToDrop", loaded && at_drop),
            ("goPark", idle && !follow && &self.park != position),
            ("followField", follow),
            ("needCharge", idle && battery < 20),
        ]
        .into_iter()
        .map(|(n, b)| (n.to_string(), Value::Bool(b)))
        .collect()
    }

    /// Head for `goal` over locked segments only.
    fn drive(&mut self, ctx: &mut Ctx, position: &Vertex, goal: &Vertex, priority: u8) {
        if position == goal {
            self.drop_projection(ctx);
            return;
        }
        if self.projection.as_ref().is_some_and(|(_, g)| g != goal) {
            self.drop_projection(ctx);
        }
        if self.projection.is_none() {
            let focus = Focus::new("route").with("from", position.clone()).with("to", goal.clone());
            let req = PerceptionRequest::new("route", focus).filtered(Filter::new("shortestPath"));
            let n = self.agent.perceive(&req, ctx.ve);
            let route = self.agent.knowledge().get("paths").and_then(Value::as_paths).and_then(|p| p.first().cloned());
            let Some(route) = route.filter(|_| n.outcome.is_ok()) else {
                self.agent.event("noRoute", format!("{position} to {goal}"));
                return;
            };
            self.agent.knowledge_write(Knowledge::single("route", route.clone()));
            let project = Action::new(self.id(), "project").with("priority", i64::from(priority)).with("path", route);
            if !self.act(ctx, project) {
                return;
            }
            let newest = ctx.ve.projections_of(self.agent.id()).last().map(|p| p.id);
            if let Some(id) = newest {
                self.stats.projections.insert(id);
                self.projection = Some((id, goal.clone()));
            }
        }
        self.perceive(ctx, "space", Focus::new("operatingSpace"));
        match refine_action("move", self.agent.id(), self.agent.knowledge(), &self.graph) {
            Refinement::Act(a) => {
                let seg = match a.params.get("segment") {
                    Some(Value::Edge(e)) => *e,
                    _ => return,
                };
                let to = a.params.get("to").and_then(Value::as_node).cloned();
                if self.act(ctx, a) {
                    if let (Some((pid, _)), Some(to)) = (&self.projection, to) {
                        self.moving = Some((*pid, seg, to));
                    }
                    self.stats.moves += 1;
                }
            }
            Refinement::Skip(reason) => {
                if reason.contains("not locked") {
                    self.stats.lock_wait_ticks += 1;
                }
            }
        }
    }

    fn drop_projection(&mut self, ctx: &mut Ctx) {
        if let Some((id, _)) = self.projection.take() {
            if ctx.ve.projections_of(self.agent.id()).iter().any(|p| p.id == id) {
                self.act(ctx, Action::new(self.id(), "withdraw").with("projectionId", id as i64));
            }
        }
        self.agent.forget("route");
    }

    fn finish_task(&mut self, ctx: &mut Ctx) {
        let Some(t) = self.task.take() else { return };
        let conv = self.agent.fresh_id();
        self.transport_mb.send(conv, &t.initiator, "done", vec![("taskId", Value::Text(t.id.clone()))]);
        if self.mode == AssignmentMode::Dyncnet {
            self.participant.apply(ParticipantEvent::TaskDone);
        }
        self.completed.push(t.id);
        let _ = ctx;
    }

    fn run_cycle(&mut self, ctx: &mut Ctx) {
        self.perceive(ctx, "body", Focus::new("resource"));
        if self.mode == AssignmentMode::Fields {
            self.perceive(ctx, "fields", Focus::new("fields"));
        }
        let k = self.agent.knowledge();
        let Some(position) = k.get("position").and_then(Value::as_node).cloned() else { return };
        let busy = truth(k, "busy");
        let loaded = truth(k, "loaded");
        let battery = k.get("battery").and_then(Value::as_int).unwrap_or(100);

        if let Some((pid, seg, to)) = self.moving.clone() {
            if !busy && position == to {
                let clear = Action::new(self.id(), "clear")
                    .with("projectionId", pid as i64)
                    .with("segments", Value::List(vec![Value::Edge(seg)]));
                self.act(ctx, clear);
                self.moving = None;
                if self.projection.as_ref().is_some_and(|(_, g)| *g == position) {
                    self.projection = None;
                    self.agent.forget("route");
                }
            }
        }

        if self.mode == AssignmentMode::Dyncnet
            && self.participant.state().phase == ParticipantPhase::Idle
            && self.task.is_none()
            && !loaded
        {
            self.participant.apply(ParticipantEvent::ReadyToWork);
        }
        {
            let AgvAgent { agent, participant, fields_mb, transport_mb, mode, .. } = self;
            match mode {
                AssignmentMode::Dyncnet => communicate(agent, &mut [participant, transport_mb], ctx),
                AssignmentMode::Fields => communicate(agent, &mut [fields_mb, transport_mb], ctx),
            }
        }
        if self.mode == AssignmentMode::Dyncnet {
            self.sync_dyncnet_task();
        }
        self.handle_mail(loaded);

        // Stage bookkeeping from the body's reports.
        if !busy {
            let mut done = false;
            if let Some(t) = self.task.as_mut() {
                match t.stage {
                    Stage::Picking if loaded => t.stage = Stage::ToDrop,
                    Stage::Picking => t.stage = Stage::ToPickup,
                    Stage::Dropping if !loaded => done = true,
                    Stage::Dropping => t.stage = Stage::ToDrop,
                    _ => {}
                }
            }
            if done {
                self.finish_task(ctx);
            }
        }
        if self.mode == AssignmentMode::Fields {
            let available = self.task.is_none() && !loaded;
            if self.available != Some(available) {
                self.available = Some(available);
                self.act(ctx, Action::new(self.id(), "publish").with("available", available));
            }
        }
        if self.task.is_none() && !loaded && position == self.park && ctx.now.0 < self.errand_cutoff {
            if let Some(next) = self.errands.pop_front() {
                self.park = next;
            }
        }
        // Flush replies produced while handling mail.
        {
            let AgvAgent { agent, participant, fields_mb, transport_mb, mode, .. } = self;
            match mode {
                AssignmentMode::Dyncnet => communicate(agent, &mut [participant, transport_mb], ctx),
                AssignmentMode::Fields => communicate(agent, &mut [fields_mb, transport_mb], ctx),
            }
        }
        if busy || self.moving.is_some() {
            return;
        }

        let fields: Vec<TaskField> = match self.agent.knowledge().get("fields") {
            Some(Value::List(xs)) => xs
                .iter()
                .filter_map(|v| match v {
                    Value::Field(f) => Some(f.clone()),
                    _ => None,
                })
                .collect(),
            _ => Vec::new(),
        };
        let flags = self.flags(&position, loaded, battery, !fields.is_empty());
        self.agent.knowledge_write(flags);
        self.selector.update_roles(self.agent.knowledge());
        self.selector.update_commitments(self.agent.knowledge());
        let assignment = self.selector.assignment(1.0);
        let external: BTreeSet<String> = ["pick", "drop", "charge"].iter().map(|s| s.to_string()).collect();
        let Some(choice) = select_action(&assignment, &external) else { return };
        self.last_selection = Some(choice.name.clone());
        let priority = self.task.as_ref().map_or(1, |t| t.priority);
        match choice.name.as_str() {
            "moveToPickup" => {
                if let Some(goal) = self.task.as_ref().map(|t| t.pickup.clone()) {
                    self.drive(ctx, &position, &goal, priority);
                }
            }
            "moveToDrop" => {
                if let Some(goal) = self.task.as_ref().and_then(|t| t.dropoff.clone()) {
                    self.drive(ctx, &position, &goal, priority);
                }
            }
            "pick" | "drop" => {
                self.drop_projection(ctx);
                let Some(t) = self.task.clone() else { return };
                let mut k = self.agent.knowledge().clone();
                k.insert("taskPickup", t.pickup.clone());
                if let Some(d) = &t.dropoff {
                    k.insert("taskDropoff", d.clone());
                }
                if let Refinement::Act(a) = refine_action(&choice.name, self.agent.id(), &k, &self.graph) {
                    if choice.name == "pick" && self.mode == AssignmentMode::Dyncnet {
                        if self.participant.state().phase != ParticipantPhase::Intentional {
                            return;
                        }
                        self.participant.apply(ParticipantEvent::TaskStarted);
                    }
                    if self.act(ctx, a) {
                        if let Some(t) = self.task.as_mut() {
                            t.stage = if choice.name == "pick" { Stage::Picking } else { Stage::Dropping };
                        }
                    }
                }
            }
            "park" => {
                let goal = self.park.clone();
                self.drive(ctx, &position, &goal, 1);
            }
            "followGradient" => {
                let next = gradient_step(&position, &fields, &self.graph, &self.field_cfg);
                if next != position {
                    self.drive(ctx, &position, &next, 1);
                } else {
                    self.drop_projection(ctx);
                }
            }
            "charge" => {
                self.drop_projection(ctx);
                self.act(ctx, Action::new(self.id(), "charge"));
            }
            _ => self.drop_projection(ctx),
        }
        let AgvAgent { agent, participant, fields_mb, transport_mb, mode, .. } = self;
        match mode {
            AssignmentMode::Dyncnet => communicate(agent, &mut [participant, transport_mb], ctx),
            AssignmentMode::Fields => communicate(agent, &mut [fields_mb, transport_mb], ctx),
        }
    }
}

/// Agent standing for one transport task.
pub struct TransportAgent {
    agent: Agent,
    spec: TaskSpec,
    mode: AssignmentMode,
    dyn_cfg: DynConfig,
    assign_radius: f64,
    initiator: Option<InitiatorHandler>,
    fields_mb: Mailbox,
    transport_mb: Mailbox,
    awaiting: Option<(String, Tick)>,
    details_sent: bool,
    pub arrived: bool,
    pub assigned: Option<(String, Tick)>,
    pub completed_at: Option<Tick>,
}

impl TransportAgent {
    pub fn new(spec: TaskSpec, ordinal: u64, mode: AssignmentMode, dyn_cfg: DynConfig, assign_radius: f64) -> Self {
        TransportAgent {
            agent: Agent::new(format!("transport-{}", spec.id), TRANSPORT_KIND, ordinal),
            spec,
            mode,
            dyn_cfg,
            assign_radius,
            initiator: None,
            fields_mb: Mailbox::new(FIELD_ASSIGN, &[], &["accept", "decline"]),
            transport_mb: Mailbox::new(TRANSPORT, &["done"], &["details", "done"]),
            awaiting: None,
            details_sent: false,
            arrived: false,
            assigned: None,
            completed_at: None,
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn initiator(&self) -> Option<&InitiatorHandler> {
        self.initiator.as_ref()
    }

    fn act(&mut self, ctx: &mut Ctx, action: Action) {
        if let Err(e) = ctx.ve.act(&action) {
            self.agent.event("actionFailed", e.to_string());
        }
    }

    fn pickup(&self) -> Vertex {
        Vertex::from(self.spec.pickup.as_str())
    }

    fn arrive(&mut self, ctx: &mut Ctx) {
        self.arrived = true;
        let id = self.agent.id().to_string();
        self.act(ctx, Action::new(&id, "publish").with("position", self.pickup()));
        match self.mode {
            AssignmentMode::Fields => {
                let field_id = self.agent.fresh_id() as i64;
                let emit = Action::new(&id, "emit")
                    .with("taskId", self.spec.id.as_str())
                    .with("fieldId", field_id)
                    .with("priority", i64::from(self.spec.priority))
                    .with("source", self.pickup());
                self.act(ctx, emit);
            }
            AssignmentMode::Dyncnet => {
                let task = TaskInfo {
                    task_id: self.spec.id.clone(),
                    kind: self.spec.kind.clone(),
                    priority: self.spec.priority,
                    location: self.pickup(),
                };
                let conv = self.agent.fresh_id();
                self.initiator = Some(InitiatorHandler::new(&id, task, conv, self.dyn_cfg.clone()));
            }
        }
    }

    /// The nearest available AGV within the assignment radius.
    fn candidate(&self, ctx: &mut Ctx) -> Option<String> {
        let me = self.agent.id().to_string();
        let scope = Focus::new("agentsInScope").with("scope", self.assign_radius).with("kind", AGV_KIND);
        let rep = ctx.ve.sense(&Sense { agent_id: me.clone(), focus: scope }).ok()?;
        let Some(Value::List(members)) = rep.0.get("agentsInScope") else { return None };
        let pickup = self.pickup();
        let dist = ctx.ve.graph().distances_from(&pickup).ok()?;
        let mut best: Option<(f64, String)> = None;
        for m in members {
            let Some(agv) = m.as_text() else { continue };
            let focus = Focus::new("resourceOf").with("agent", agv);
            let Ok(r) = ctx.ve.sense(&Sense { agent_id: me.clone(), focus }) else { continue };
            if !r.0.get("available").and_then(Value::as_bool).unwrap_or(false) {
                continue;
            }
            let Some(d) = r.0.get("position").and_then(Value::as_node).and_then(|p| dist.get(p)).copied() else {
                continue;
            };
            if best.as_ref().is_none_or(|(bd, bid)| d < *bd || (d == *bd && agv < bid.as_str())) {
                best = Some((d, agv.to_string()));
            }
        }
        best.map(|(_, a)| a)
    }

    fn run_cycle(&mut self, ctx: &mut Ctx) {
        if ctx.now.0 < self.spec.arrival || self.completed_at.is_some() {
            return;
        }
        if !self.arrived {
            self.arrive(ctx);
        }
        let id = self.agent.id().to_string();
        match self.mode {
            AssignmentMode::Dyncnet => {
                let present: BTreeSet<String> = ctx.ve.addresses().keys().cloned().collect();
                let Some(init) = self.initiator.as_mut() else { return };
                init.on_tick(|a| present.contains(a));
                if init.state().phase == InitiatorPhase::Executing && !self.details_sent {
                    if let Some(w) = init.state().provisional_winner.clone() {
                        self.details_sent = true;
                        self.assigned = Some((w.clone(), ctx.now));
                        let conv = self.agent.fresh_id();
                        self.transport_mb.send(
                            conv,
                            &w,
                            "details",
                            vec![
                                ("taskId", Value::Text(self.spec.id.clone())),
                                ("dropoff", Value::Node(Vertex::from(self.spec.dropoff.as_str()))),
                                ("priority", Value::Int(i64::from(self.spec.priority))),
                            ],
                        );
                    }
                }
                let TransportAgent { agent, initiator, transport_mb, .. } = self;
                if let Some(init) = initiator.as_mut() {
                    communicate(agent, &mut [init, transport_mb], ctx);
                }
            }
            AssignmentMode::Fields => {
                {
                    let TransportAgent { agent, fields_mb, transport_mb, .. } = self;
                    communicate(agent, &mut [fields_mb, transport_mb], ctx);
                }
                while let Some(d) = self.fields_mb.take() {
                    if self.awaiting.as_ref().map(|(a, _)| a) != Some(&d.sender) {
                        continue;
                    }
                    self.awaiting = None;
                    if d.performative == "accept" && self.assigned.is_none() {
                        self.assigned = Some((d.sender.clone(), ctx.now));
                        self.act(ctx, Action::new(&id, "removeField").with("taskId", self.spec.id.as_str()));
                    }
                }
                if self.awaiting.as_ref().is_some_and(|(_, since)| ctx.now.0 > since.0 + 20) {
                    self.awaiting = None;
                }
                if self.assigned.is_none() && self.awaiting.is_none() {
                    if let Some(agv) = self.candidate(ctx) {
                        let conv = self.agent.fresh_id();
                        self.fields_mb.send(
                            conv,
                            &agv,
                            "assign",
                            vec![
                                ("taskId", Value::Text(self.spec.id.clone())),
                                ("pickup", Value::Node(self.pickup())),
                                ("dropoff", Value::Node(Vertex::from(self.spec.dropoff.as_str()))),
                                ("priority", Value::Int(i64::from(self.spec.priority))),
                            ],
                        );
                        self.awaiting = Some((agv, ctx.now));
                    }
                }
                let TransportAgent { agent, fields_mb, transport_mb, .. } = self;
                communicate(agent, &mut [fields_mb, transport_mb], ctx);
            }
        }
        while let Some(d) = self.transport_mb.take() {
            if d.performative == "done" && self.completed_at.is_none() {
                self.completed_at = Some(ctx.now);
                if let Some(init) = self.initiator.as_mut() {
                    init.task_completed();
                }
            }
        }
    }
}

pub enum AgvUnit {
    Agv(Box<AgvAgent>),
    Transport(Box<TransportAgent>),
}

impl Unit for AgvUnit {
    fn agent(&self) -> &Agent {
        match self {
            AgvUnit::Agv(a) => &a.agent,
            AgvUnit::Transport(t) => &t.agent,
        }
    }

    fn agent_mut(&mut self) -> &mut Agent {
        match self {
            AgvUnit::Agv(a) => &mut a.agent,
            AgvUnit::Transport(t) => &mut t.agent,
        }
    }

    fn cycle(&mut self, ctx: &mut Ctx) {
        match self {
            AgvUnit::Agv(a) => a.run_cycle(ctx),
            AgvUnit::Transport(t) => t.run_cycle(ctx),
        }
    }
}

impl AgvUnit {
    pub fn as_agv(&self) -> Option<&AgvAgent> {
        match self {
            AgvUnit::Agv(a) => Some(a),
            AgvUnit::Transport(_) => None,
        }
    }

    pub fn as_transport(&self) -> Option<&TransportAgent> {
        match self {
            AgvUnit::Transport(t) => Some(t),
            AgvUnit::Agv(_) => None,
        }
    }
}

/// Resolved constants of an AGV run.
#[derive(Debug, Clone, PartialEq)]
pub struct AgvSettings {
    pub mode: AssignmentMode,
    pub dyn_cfg: DynConfig,
    pub field_cfg: FieldConfig,
    pub body: BodyParams,
    pub assign_radius: f64,
    pub comm_budget: usize,
}

impl AgvSettings {
    pub fn from_config(cfg: &ScenarioConfig, graph: &SegmentGraph) -> Self {
        let p = &cfg.protocol;
        let dflt = DynConfig::default();
        let fdflt = FieldConfig::default();
        AgvSettings {
            mode: cfg.scenario.assignment.unwrap_or(AssignmentMode::Dyncnet),
            dyn_cfg: DynConfig {
                delta: p.delta.unwrap_or_else(|| graph.mean_edge_length()),
                timer_period: p.timer_period.unwrap_or(dflt.timer_period),
                scope_unit: p.scope_unit.unwrap_or(dflt.scope_unit),
            },
            field_cfg: FieldConfig {
                range_unit_meters: p.range_unit.unwrap_or(fdflt.range_unit_meters),
                age_ticks: p.age_ticks.unwrap_or(fdflt.age_ticks),
            },
            body: BodyParams { speed: p.speed.unwrap_or(BodyParams::default().speed), ..BodyParams::default() },
            assign_radius: p.assign_radius.unwrap_or(30.0),
            comm_budget: p.comm_budget.unwrap_or(32),
        }
    }
}

/// Per-tick protocol safety: at most one bound AGV per task.
pub fn dyncnet_violations(world: &World<AgvUnit>) -> Vec<String> {
    let mut bound: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for a in world.units().filter_map(AgvUnit::as_agv) {
        let st = a.participant.state();
        if st.phase == ParticipantPhase::Bound {
            if let Some(pt) = &st.provisional_task {
                bound.entry(pt.task_id.as_str()).or_default().push(a.id());
            }
        }
    }
    bound
        .into_iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(t, v)| format!("task {t} bound to {}", v.join(", ")))
        .collect()
}

/// Tasks of the configuration plus those drawn by its generator.
pub fn task_list(cfg: &ScenarioConfig, graph: &SegmentGraph, seed: u64) -> Vec<TaskSpec> {
    let mut tasks = cfg.tasks.clone();
    if let Some(g) = &cfg.generator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<String> = graph.nodes().map(|v| v.0.clone()).collect();
        let pickups = if g.pickups.is_empty() { all.clone() } else { g.pickups.clone() };
        let dropoffs = if g.dropoffs.is_empty() { all } else { g.dropoffs.clone() };
        for i in 0..g.tasks {
            let pickup = pickups[rng.gen_range(0..pickups.len())].clone();
            let mut dropoff = dropoffs[rng.gen_range(0..dropoffs.len())].clone();
            if dropoff == pickup && dropoffs.len() > 1 {
                dropoff = dropoffs.iter().find(|d| **d != pickup).cloned().unwrap_or(dropoff);
            }
            tasks.push(TaskSpec {
                id: format!("g{}", i + 1),
                arrival: rng.gen_range(0..g.horizon),
                pickup,
                dropoff,
                kind: "regular".into(),
                priority: rng.gen_range(1..=3),
            });
        }
    }
    tasks
}

/// An AGV world under construction or running.
pub struct AgvScenario {
    pub world: World<AgvUnit>,
    pub settings: AgvSettings,
    pub violations: Vec<String>,
    homes: BTreeMap<String, (Vertex, Vertex)>,
    membership: Vec<(u64, String, MembershipAction)>,
}

impl AgvScenario {
    pub fn new(
        network: NetworkConfig,
        graph: Arc<SegmentGraph>,
        settings: AgvSettings,
    ) -> Result<Self, crate::kernel::KernelError> {
        let mut lang = ContentLanguage::new();
        register_schemas(&mut lang);
        let world = World::new(network, graph, Arc::new(lang), settings.comm_budget)?;
        Ok(AgvScenario { world, settings, violations: Vec::new(), homes: BTreeMap::new(), membership: Vec::new() })
    }

    /// Build the run described by a validated configuration.
    pub fn from_config(cfg: &ScenarioConfig, graph: SegmentGraph, seed: u64) -> Result<Self, crate::kernel::KernelError> {
        let settings = AgvSettings::from_config(cfg, &graph);
        let network = NetworkConfig { latency_ticks: cfg.network.latency, drop_probability: cfg.network.drop, seed };
        let graph = Arc::new(graph);
        let tasks = task_list(cfg, &graph, seed);
        let mut s = AgvScenario::new(network, graph, settings)?;
        s.add_base(tasks)?;
        for a in &cfg.agents {
            let park = a.park.clone().unwrap_or_else(|| a.home.clone());
            let mut body = s.settings.body.clone();
            if let Some(speed) = a.speed {
                body.speed = speed;
            }
            s.add_agv_with(&a.id, Vertex::from(a.home.as_str()), Vertex::from(park.as_str()), Vec::new(), u64::MAX, body)?;
        }
        s.membership = cfg.membership.iter().map(|m| (m.tick, m.agent.clone(), m.action)).collect();
        Ok(s)
    }

    fn environment(&mut self, node: &NodeId) -> crate::env::VirtualEnvironment {
        let mut ve = self.world.environment(node);
        ve.set_field_config(self.settings.field_cfg.clone());
        ve.register_scope_kind(dyncnet::PROTOCOL, AGV_KIND);
        ve.add_sync_rule(SyncRule::FieldAging);
        ve
    }

    pub fn add_base(&mut self, tasks: Vec<TaskSpec>) -> Result<(), crate::kernel::KernelError> {
        let node = NodeId::new(BASE_NODE);
        let ve = self.environment(&node);
        let mut units = Vec::new();
        for t in tasks {
            let o = self.world.ordinal();
            units.push(AgvUnit::Transport(Box::new(TransportAgent::new(
                t,
                o,
                self.settings.mode,
                self.settings.dyn_cfg.clone(),
                self.settings.assign_radius,
            ))));
        }
        self.world.add_node(node, ve, units)
    }

    pub fn add_agv(&mut self, id: &str, home: Vertex, park: Vertex, errands: Vec<Vertex>) -> Result<(), crate::kernel::KernelError> {
        let body = self.settings.body.clone();
        self.add_agv_with(id, home, park, errands, u64::MAX, body)
    }

    fn add_agv_with(
        &mut self,
        id: &str,
        home: Vertex,
        park: Vertex,
        errands: Vec<Vertex>,
        cutoff: u64,
        body: BodyParams,
    ) -> Result<(), crate::kernel::KernelError> {
        self.homes.insert(id.to_string(), (home.clone(), park.clone()));
        let node = node_of_agent(id);
        let mut ve = self.environment(&node);
        ve.add_sync_rule(SyncRule::ExternalMirror);
        let graph = self.world.graph().clone();
        ve.set_external(Box::new(AgvBody::new(id, graph.clone(), body, home)));
        let o = self.world.ordinal();
        let mut agv = AgvAgent::new(
            id,
            o,
            self.settings.mode,
            graph,
            self.settings.dyn_cfg.clone(),
            self.settings.field_cfg.clone(),
            park,
        );
        if !errands.is_empty() {
            agv = agv.with_errands(errands, cutoff);
        }
        self.world.add_node(node, ve, vec![AgvUnit::Agv(Box::new(agv))])
    }

    pub fn agv(&self, id: &str) -> Option<&AgvAgent> {
        self.world.units().filter_map(AgvUnit::as_agv).find(|a| a.id() == id)
    }

    pub fn transport(&self, task: &str) -> Option<&TransportAgent> {
        self.world.all_units().filter_map(AgvUnit::as_transport).find(|t| t.spec.id == task)
    }

    pub fn transports(&self) -> impl Iterator<Item = &TransportAgent> {
        self.world.all_units().filter_map(AgvUnit::as_transport)
    }

    pub fn agvs(&self) -> impl Iterator<Item = &AgvAgent> {
        self.world.all_units().filter_map(AgvUnit::as_agv)
    }

    /// Take an AGV's node down now.
    pub fn kill_agv(&mut self, id: &str) -> Result<(), crate::kernel::KernelError> {
        self.world.leave(&node_of_agent(id))
    }

    pub fn step_tick(&mut self) {
        let t = self.world.begin_tick();
        let due: Vec<(String, MembershipAction)> =
            self.membership.iter().filter(|(at, _, _)| *at == t.0).map(|(_, a, m)| (a.clone(), *m)).collect();
        for (agent, action) in due {
            let node = node_of_agent(&agent);
            let r = match action {
                MembershipAction::Leave => self.world.leave(&node),
                MembershipAction::Join if self.world.host(&node).is_none() => {
                    let (home, park) = self.homes.get(&agent).cloned().unwrap_or_else(|| ("".into(), "".into()));
                    self.add_agv(&agent, home, park, Vec::new())
                }
                MembershipAction::Join => Ok(()),
            };
            if let Err(e) = r {
                self.world.note(&NodeId::new(BASE_NODE), "membershipFailed", e.to_string());
            }
        }
        self.world.step_tick();
        for v in dyncnet_violations(&self.world) {
            self.violations.push(format!("tick {t}: {v}"));
        }
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step_tick();
        }
    }

    pub fn lock_safety_violations(&self) -> usize {
        self.world.lock_violations().len()
    }
}

/// Rows by columns grid of 10 m segments, ids assigned row-major,
/// horizontal segments first. `skip` segments are left out from the end.
pub fn grid_graph(rows: usize, cols: usize, skip: usize) -> SegmentGraph {
    let mut g = SegmentGraph::new(false);
    let name = |r: usize, c: usize| format!("r{r}c{c}");
    for r in 0..rows {
        for c in 0..cols {
            g.add_node(name(r, c).as_str()).expect("fresh node");
        }
    }
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 1..cols {
            edges.push((name(r, c - 1), name(r, c)));
        }
    }
    for r in 1..rows {
        for c in 0..cols {
            edges.push((name(r - 1, c), name(r, c)));
        }
    }
    edges.truncate(edges.len().saturating_sub(skip));
    for (i, (a, b)) in edges.iter().enumerate() {
        g.add_edge(i as u32 + 1, a.as_str(), b.as_str(), 10.0).expect("fresh edge");
    }
    g
}

/// Outcome of a randomized mutual-exclusion run.
#[derive(Debug, Clone, PartialEq)]
pub struct DrillReport {
    pub submitted: BTreeSet<u64>,
    pub granted: BTreeSet<u64>,
    /// Ticks with two granted claims sharing a segment.
    pub violation_ticks: usize,
    pub moves: u64,
}

/// `agvs` AGVs running random errands over `graph` for `ticks` ticks.
/// Errands stop starting at `cutoff`.
pub fn lock_drill(graph: SegmentGraph, agvs: usize, ticks: u64, cutoff: u64, seed: u64) -> Result<DrillReport, crate::kernel::KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<Vertex> = graph.nodes().cloned().collect();
    let network = NetworkConfig { latency_ticks: 1, drop_probability: 0.0, seed };
    let settings = AgvSettings {
        mode: AssignmentMode::Fields,
        dyn_cfg: DynConfig::default(),
        field_cfg: FieldConfig::default(),
        body: BodyParams::default(),
        assign_radius: 0.0,
        comm_budget: 32,
    };
    let mut s = AgvScenario::new(network, Arc::new(graph), settings)?;
    let mut homes = nodes.clone();
    for i in 0..agvs.min(nodes.len()) {
        let home = homes.swap_remove(rng.gen_range(0..homes.len()));
        let errands: Vec<Vertex> = (0..12).map(|_| nodes[rng.gen_range(0..nodes.len())].clone()).collect();
        let body = s.settings.body.clone();
        s.add_agv_with(&format!("agv{}", i + 1), home.clone(), home, errands, cutoff, body)?;
    }
    s.run(ticks);
    let submitted = s.agvs().flat_map(|a| a.stats.projections.iter().copied()).collect();
    let mut ticks_bad: Vec<Tick> = s.world.lock_violations().iter().map(|(t, _, _)| *t).collect();
    ticks_bad.dedup();
    Ok(DrillReport {
        submitted,
        granted: s.world.granted().clone(),
        violation_ticks: ticks_bad.len(),
        moves: s.agvs().map(|a| a.stats.moves).sum(),
    })
}
