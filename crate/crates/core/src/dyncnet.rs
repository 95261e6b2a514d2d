//! DynCNET: contract net with provisional, switchable assignments that
//! become final with a `bound` message.
//!
//! The automata are pure transition functions. [`InitiatorHandler`] and
//! [`ParticipantHandler`] wrap them as protocol handlers for the agent
//! communication pipeline; [`model_check`] explores every interleaving of a
//! small system over the same functions.
//!
//! Switching is a handshake: the initiator sends `abort` to its current
//! winner and only sends `provisional-accept` to the new candidate once the
//! winner acknowledged with `retract`. A `bound` that crosses the abort is
//! honored and the switch is dropped.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{Conversation, Outbound, ProtocolHandler};
use crate::codec::{ContentLanguage, Domain, MessageData};
use crate::env::AddressEntry;
use crate::graph::{SegmentGraph, Vertex};
use crate::kernel::Tick;
use crate::value::{Knowledge, Value};

pub const PROTOCOL: &str = "DynCNET";

pub fn register_schema(lang: &mut ContentLanguage) {
    let task = || [("taskId", Domain::Ident)];
    lang.register(
        PROTOCOL,
        "cfp",
        &[
            ("type", Domain::OneOf(vec!["regular".into(), "urgent".into()])),
            ("priority", Domain::Priority),
            ("location", Domain::Node),
        ],
    );
    lang.register(PROTOCOL, "proposal", &[("cost", Domain::Meters)]);
    for p in ["provisional-accept", "bound", "retract", "abort"] {
        lang.register(PROTOCOL, p, &task());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynConfig {
    /// Minimal cost improvement that justifies a switch.
    pub delta: f64,
    pub timer_period: u64,
    /// Scope per priority level, in meters.
    pub scope_unit: f64,
}

impl Default for DynConfig {
    fn default() -> Self {
        DynConfig { delta: 10.0, timer_period: 10, scope_unit: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task_id: String,
    pub kind: String,
    pub priority: u8,
    pub location: Vertex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub agv: String,
    pub cost: f64,
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Recipient {
    /// Path-distance scope around the sender, in meters.
    Scope(f64),
    Agent(String),
}

impl Recipient {
    pub fn address(&self) -> String {
        match self {
            Recipient::Scope(m) => format!("{m}m"),
            Recipient::Agent(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Perf {
    Cfp,
    Proposal(f64),
    ProvisionalAccept,
    Bound,
    Retract,
    Abort,
}

impl Perf {
    pub fn name(&self) -> &'static str {
        match self {
            Perf::Cfp => "cfp",
            Perf::Proposal(_) => "proposal",
            Perf::ProvisionalAccept => "provisional-accept",
            Perf::Bound => "bound",
            Perf::Retract => "retract",
            Perf::Abort => "abort",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynMsg {
    pub to: Recipient,
    pub perf: Perf,
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub state: S,
    pub out: Vec<DynMsg>,
    pub violation: Option<String>,
    /// The step moved an assignment from one party to another.
    pub switched: bool,
}

impl<S> Transition<S> {
    fn quiet(state: S) -> Self {
        Transition { state, out: Vec::new(), violation: None, switched: false }
    }
}

// ---- initiator ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitiatorPhase {
    Active,
    Assigned,
    Executing,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitiatorState {
    pub task: TaskInfo,
    pub phase: InitiatorPhase,
    pub provisional_winner: Option<String>,
    /// The winner's proposal.
    pub best_proposal: Option<Proposal>,
    /// Proposals not yet acted upon, one per participant.
    pub proposals: Vec<Proposal>,
    /// Candidate waiting for the current winner to acknowledge an abort.
    pub switching_to: Option<Proposal>,
    pub cfp_timer_ticks: u64,
}

impl InitiatorState {
    pub fn new(task: TaskInfo) -> Self {
        InitiatorState {
            task,
            phase: InitiatorPhase::Active,
            provisional_winner: None,
            best_proposal: None,
            proposals: Vec::new(),
            switching_to: None,
            cfp_timer_ticks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitiatorEvent {
    TaskReady,
    TimerFired,
    ProposalReceived { agv: String, cost: f64 },
    BoundReceived { agv: String },
    RetractReceived { agv: String },
    TaskCompleted,
    AgvInOutScope { agv: String, inside: bool },
}

fn best(proposals: &[Proposal]) -> Option<&Proposal> {
    proposals.iter().min_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.agv.cmp(&b.agv)))
}

pub fn initiator_step(s: &InitiatorState, ev: &InitiatorEvent, cfg: &DynConfig) -> Transition<InitiatorState> {
    use InitiatorPhase::*;
    let mut n = s.clone();
    let task = s.task.task_id.clone();
    let msg = |to: Recipient, perf: Perf| DynMsg { to, perf, task_id: task.clone() };
    let cfp = || msg(Recipient::Scope(f64::from(s.task.priority) * cfg.scope_unit), Perf::Cfp);
    let mut t = Transition::quiet(n.clone());
    match (s.phase, ev) {
        (Active, InitiatorEvent::TaskReady) => {
            n.cfp_timer_ticks = 0;
            t.out.push(cfp());
        }
        (Active, InitiatorEvent::TimerFired) => {
            n.cfp_timer_ticks = 0;
            if let Some(p) = best(&s.proposals).cloned() {
                n.proposals.retain(|q| q.agv != p.agv);
                n.phase = Assigned;
                n.provisional_winner = Some(p.agv.clone());
                t.out.push(msg(Recipient::Agent(p.agv.clone()), Perf::ProvisionalAccept));
                n.best_proposal = Some(p);
            } else {
                t.out.push(cfp());
            }
        }
        (Assigned, InitiatorEvent::TimerFired) => {
            n.cfp_timer_ticks = 0;
            if s.switching_to.is_none() {
                t.out.push(cfp());
            }
        }
        (Active | Assigned, InitiatorEvent::ProposalReceived { agv, cost }) => {
            let p = Proposal { agv: agv.clone(), cost: *cost, task_id: task.clone() };
            n.proposals.retain(|q| &q.agv != agv);
            let winner_cost = s.best_proposal.as_ref().map_or(f64::INFINITY, |b| b.cost);
            let better = *cost + cfg.delta <= winner_cost;
            if s.phase == Assigned && s.switching_to.is_none() && s.provisional_winner.as_ref() != Some(agv) && better {
                let old = s.provisional_winner.clone().expect("assigned has a winner");
                n.switching_to = Some(p);
                t.out.push(msg(Recipient::Agent(old), Perf::Abort));
                t.switched = true;
            } else if s.provisional_winner.as_ref() != Some(agv) {
                n.proposals.push(p);
            }
        }
        (Assigned, InitiatorEvent::RetractReceived { agv }) if s.provisional_winner.as_ref() == Some(agv) => {
            match s.switching_to.clone() {
                Some(c) => {
                    n.switching_to = None;
                    n.provisional_winner = Some(c.agv.clone());
                    t.out.push(msg(Recipient::Agent(c.agv.clone()), Perf::ProvisionalAccept));
                    n.best_proposal = Some(c);
                }
                None => {
                    n.phase = Active;
                    n.provisional_winner = None;
                    n.best_proposal = None;
                }
            }
        }
        (Active | Assigned, InitiatorEvent::RetractReceived { agv }) => {
            n.proposals.retain(|q| &q.agv != agv);
            if s.switching_to.as_ref().is_some_and(|c| &c.agv == agv) {
                n.switching_to = None;
            }
        }
        (Assigned, InitiatorEvent::BoundReceived { agv }) if s.provisional_winner.as_ref() == Some(agv) => {
            n.phase = Executing;
            n.switching_to = None;
            n.proposals.clear();
        }
        (_, InitiatorEvent::BoundReceived { agv }) => {
            t.violation = Some(format!("bound from {agv}, not the provisional winner of {task}"));
            t.out.push(msg(Recipient::Agent(agv.clone()), Perf::Abort));
        }
        (Executing, InitiatorEvent::TaskCompleted) => n.phase = Completed,
        (Active | Assigned, InitiatorEvent::AgvInOutScope { agv, inside: false }) => {
            n.proposals.retain(|q| &q.agv != agv);
            if s.switching_to.as_ref().is_some_and(|c| &c.agv == agv) {
                n.switching_to = None;
            }
            if s.phase == Assigned && s.provisional_winner.as_ref() == Some(agv) {
                // Same as a retract from the winner.
                let mut after = n.clone();
                after.switching_to = s.switching_to.clone().filter(|c| &c.agv != agv);
                return initiator_step(&after, &InitiatorEvent::RetractReceived { agv: agv.clone() }, cfg);
            }
        }
        _ => {}
    }
    t.state = n;
    t
}

// ---- participant ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParticipantPhase {
    Voting,
    Intentional,
    Bound,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionalTask {
    pub initiator: String,
    pub task_id: String,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantState {
    pub phase: ParticipantPhase,
    pub provisional_task: Option<ProvisionalTask>,
    /// Cost quoted to each initiator.
    pub offers: BTreeMap<String, f64>,
}

impl ParticipantState {
    pub fn new() -> Self {
        ParticipantState { phase: ParticipantPhase::Idle, provisional_task: None, offers: BTreeMap::new() }
    }
}

impl Default for ParticipantState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParticipantEvent {
    ReadyToWork,
    CfpReceived { initiator: String, cost: f64 },
    ProvisionalAcceptReceived { initiator: String, task_id: String },
    AbortReceived { initiator: String },
    TaskStarted,
    TaskInOutScope { initiator: String, inside: bool },
    TaskDone,
}

pub fn participant_step(s: &ParticipantState, ev: &ParticipantEvent, cfg: &DynConfig) -> Transition<ParticipantState> {
    use ParticipantPhase::*;
    let mut n = s.clone();
    let mut t = Transition::quiet(n.clone());
    let to = |i: &str, perf: Perf, task: &str| DynMsg { to: Recipient::Agent(i.to_string()), perf, task_id: task.to_string() };
    match (s.phase, ev) {
        (Idle, ParticipantEvent::ReadyToWork) => {
            n.phase = Voting;
            n.offers.clear();
        }
        (Voting, ParticipantEvent::CfpReceived { initiator, cost }) => {
            n.offers.insert(initiator.clone(), *cost);
            t.out.push(to(initiator, Perf::Proposal(*cost), ""));
        }
        (Voting, ParticipantEvent::ProvisionalAcceptReceived { initiator, task_id }) => {
            let cost = s.offers.get(initiator).copied().unwrap_or(f64::INFINITY);
            n.phase = Intentional;
            n.provisional_task = Some(ProvisionalTask { initiator: initiator.clone(), task_id: task_id.clone(), cost });
        }
        (Intentional, ParticipantEvent::ProvisionalAcceptReceived { initiator, task_id }) => {
            let cur = s.provisional_task.clone().expect("intentional has a task");
            if &cur.initiator == initiator {
                return t;
            }
            let cost = s.offers.get(initiator).copied().unwrap_or(f64::INFINITY);
            if cost + cfg.delta <= cur.cost {
                t.out.push(to(&cur.initiator, Perf::Retract, &cur.task_id));
                n.provisional_task = Some(ProvisionalTask { initiator: initiator.clone(), task_id: task_id.clone(), cost });
                t.switched = true;
            } else {
                t.out.push(to(initiator, Perf::Retract, task_id));
            }
        }
        (Bound | Idle, ParticipantEvent::ProvisionalAcceptReceived { initiator, task_id }) => {
            let same = s.provisional_task.as_ref().is_some_and(|p| &p.initiator == initiator);
            if !same {
                if s.phase == Bound {
                    t.violation = Some(format!("provisional-accept for {task_id} while bound"));
                }
                t.out.push(to(initiator, Perf::Retract, task_id));
            }
        }
        (Intentional, ParticipantEvent::AbortReceived { initiator }) => {
            let cur = s.provisional_task.clone().expect("intentional has a task");
            if &cur.initiator == initiator {
                n.phase = Voting;
                n.provisional_task = None;
                n.offers.remove(initiator);
                t.out.push(to(initiator, Perf::Retract, &cur.task_id));
            }
        }
        (Intentional, ParticipantEvent::TaskStarted) => {
            let cur = s.provisional_task.clone().expect("intentional has a task");
            n.phase = Bound;
            t.out.push(to(&cur.initiator, Perf::Bound, &cur.task_id));
        }
        (Intentional, ParticipantEvent::TaskInOutScope { initiator, inside: false }) => {
            n.offers.remove(initiator);
            if s.provisional_task.as_ref().is_some_and(|p| &p.initiator == initiator) {
                n.phase = Voting;
                n.provisional_task = None;
            }
        }
        (Voting, ParticipantEvent::TaskInOutScope { initiator, inside: false }) => {
            n.offers.remove(initiator);
        }
        (Bound, ParticipantEvent::TaskDone) => {
            n.phase = Idle;
            n.provisional_task = None;
            n.offers.clear();
        }
        _ => {}
    }
    t.state = n;
    t
}

/// Agents of `kind` within `scope` meters (path distance) of `center`.
pub fn scope_members(
    center: &Vertex,
    scope: f64,
    kind: &str,
    addresses: &BTreeMap<String, AddressEntry>,
    graph: &SegmentGraph,
) -> BTreeSet<String> {
    let Ok(dist) = graph.distances_from(center) else { return BTreeSet::new() };
    addresses
        .iter()
        .filter(|(_, a)| a.kind == kind)
        .filter(|(_, a)| a.position.as_ref().and_then(|p| dist.get(p)).is_some_and(|d| *d <= scope))
        .map(|(id, _)| id.clone())
        .collect()
}

// ---- protocol handlers ----------------------------------------------------

/// Task agent side of DynCNET.
#[derive(Debug, Clone)]
pub struct InitiatorHandler {
    me: String,
    cfg: DynConfig,
    state: InitiatorState,
    conversation: u64,
    queue: VecDeque<Outbound>,
    started: bool,
    pub violations: Vec<String>,
    pub switches: u64,
}

impl InitiatorHandler {
    pub fn new(me: &str, task: TaskInfo, conversation: u64, cfg: DynConfig) -> Self {
        InitiatorHandler {
            me: me.to_string(),
            cfg,
            state: InitiatorState::new(task),
            conversation,
            queue: VecDeque::new(),
            started: false,
            violations: Vec::new(),
            switches: 0,
        }
    }

    pub fn state(&self) -> &InitiatorState {
        &self.state
    }

    fn apply(&mut self, ev: InitiatorEvent) {
        let t = initiator_step(&self.state, &ev, &self.cfg);
        self.state = t.state;
        if let Some(v) = t.violation {
            self.violations.push(v);
        }
        if t.switched {
            self.switches += 1;
        }
        for m in t.out {
            self.queue.push_back(self.outbound(&m));
        }
    }

    fn outbound(&self, m: &DynMsg) -> Outbound {
        let content = match &m.perf {
            Perf::Cfp => vec![
                ("type", Value::Text(self.state.task.kind.clone())),
                ("priority", Value::Int(i64::from(self.state.task.priority))),
                ("location", Value::Node(self.state.task.location.clone())),
            ],
            Perf::Proposal(c) => vec![("cost", Value::Num(*c))],
            _ => vec![("taskId", Value::Text(m.task_id.clone()))],
        };
        Outbound { conversation: self.conversation, receiver: m.to.address(), performative: m.perf.name().into(), content }
    }

    /// Per-tick bookkeeping: start, timer, and departed winners. `present`
    /// tells whether a participant is still reachable.
    pub fn on_tick(&mut self, present: impl Fn(&str) -> bool) {
        if !self.started {
            self.started = true;
            self.apply(InitiatorEvent::TaskReady);
            return;
        }
        let gone: Vec<String> = self
            .state
            .provisional_winner
            .iter()
            .chain(self.state.switching_to.iter().map(|p| &p.agv))
            .chain(self.state.proposals.iter().map(|p| &p.agv))
            .filter(|a| !present(a))
            .cloned()
            .collect();
        for agv in gone {
            self.apply(InitiatorEvent::AgvInOutScope { agv, inside: false });
        }
        self.state.cfp_timer_ticks += 1;
        if self.state.cfp_timer_ticks >= self.cfg.timer_period {
            self.apply(InitiatorEvent::TimerFired);
        }
    }

    pub fn task_completed(&mut self) {
        self.apply(InitiatorEvent::TaskCompleted);
    }
}

impl ProtocolHandler for InitiatorHandler {
    fn protocol(&self) -> &str {
        PROTOCOL
    }

    fn opens(&self, _: &str) -> bool {
        false
    }

    fn incoming(&mut self, d: &MessageData, _: &Knowledge, _: Tick) -> Knowledge {
        let agv = d.sender.clone();
        let ev = match d.performative.as_str() {
            "proposal" => InitiatorEvent::ProposalReceived { agv, cost: d.field("cost").and_then(Value::as_num).unwrap_or(f64::INFINITY) },
            "bound" => InitiatorEvent::BoundReceived { agv },
            "retract" => InitiatorEvent::RetractReceived { agv },
            other => {
                self.violations.push(format!("{other} from {agv} at initiator {}", self.me));
                return Knowledge::new();
            }
        };
        self.apply(ev);
        Knowledge::single("dyncnetPhase", format!("{:?}", self.state.phase).as_str())
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        self.queue.pop_front()
    }

    fn is_final(&self, _: &Conversation) -> bool {
        self.queue.is_empty() && matches!(self.state.phase, InitiatorPhase::Executing | InitiatorPhase::Completed)
    }
}

/// AGV side of DynCNET. Proposal costs are path distances from the
/// `position` knowledge item to the task location.
#[derive(Debug, Clone)]
pub struct ParticipantHandler {
    cfg: DynConfig,
    graph: Arc<SegmentGraph>,
    state: ParticipantState,
    conversations: BTreeMap<String, u64>,
    queue: VecDeque<Outbound>,
    locations: BTreeMap<String, Vertex>,
    pub violations: Vec<String>,
    pub switches: u64,
}

impl ParticipantHandler {
    pub fn new(graph: Arc<SegmentGraph>, cfg: DynConfig) -> Self {
        ParticipantHandler {
            cfg,
            graph,
            state: ParticipantState::new(),
            conversations: BTreeMap::new(),
            queue: VecDeque::new(),
            locations: BTreeMap::new(),
            violations: Vec::new(),
            switches: 0,
        }
    }

    pub fn state(&self) -> &ParticipantState {
        &self.state
    }

    /// Location of the provisionally assigned task.
    pub fn task_location(&self) -> Option<&Vertex> {
        self.state.provisional_task.as_ref().and_then(|p| self.locations.get(&p.initiator))
    }

    pub fn apply(&mut self, ev: ParticipantEvent) {
        let t = participant_step(&self.state, &ev, &self.cfg);
        self.state = t.state;
        if let Some(v) = t.violation {
            self.violations.push(v);
        }
        if t.switched {
            self.switches += 1;
        }
        for m in t.out {
            let Recipient::Agent(to) = &m.to else { continue };
            let conversation = self.conversations.get(to).copied().unwrap_or(0);
            let content = match &m.perf {
                Perf::Proposal(c) => vec![("cost", Value::Num(*c))],
                _ => vec![("taskId", Value::Text(m.task_id.clone()))],
            };
            self.queue.push_back(Outbound { conversation, receiver: to.clone(), performative: m.perf.name().into(), content });
        }
    }

    /// Drop tasks whose initiator is no longer reachable.
    pub fn prune(&mut self, present: impl Fn(&str) -> bool) {
        let gone: Vec<String> = self.state.offers.keys().filter(|i| !present(i)).cloned().collect();
        for initiator in gone {
            self.apply(ParticipantEvent::TaskInOutScope { initiator, inside: false });
        }
    }
}

impl ProtocolHandler for ParticipantHandler {
    fn protocol(&self) -> &str {
        PROTOCOL
    }

    fn opens(&self, performative: &str) -> bool {
        matches!(performative, "cfp" | "provisional-accept")
    }

    fn incoming(&mut self, d: &MessageData, k: &Knowledge, _: Tick) -> Knowledge {
        let initiator = d.sender.clone();
        self.conversations.insert(initiator.clone(), d.conversation);
        let ev = match d.performative.as_str() {
            "cfp" => {
                let Some(loc) = d.field("location").and_then(Value::as_node).cloned() else { return Knowledge::new() };
                let cost = k
                    .get("position")
                    .and_then(Value::as_node)
                    .and_then(|p| self.graph.distance(p, &loc).ok())
                    .unwrap_or(f64::INFINITY);
                self.locations.insert(initiator.clone(), loc);
                if !cost.is_finite() {
                    return Knowledge::new();
                }
                ParticipantEvent::CfpReceived { initiator, cost }
            }
            "provisional-accept" => ParticipantEvent::ProvisionalAcceptReceived {
                initiator,
                task_id: d.text("taskId").unwrap_or_default().to_string(),
            },
            "abort" => ParticipantEvent::AbortReceived { initiator },
            other => {
                self.violations.push(format!("{other} from {initiator} at a participant"));
                return Knowledge::new();
            }
        };
        self.apply(ev);
        Knowledge::single("dyncnetPhase", format!("{:?}", self.state.phase).as_str())
    }

    fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
        self.queue.pop_front()
    }

    fn is_final(&self, c: &Conversation) -> bool {
        let Some(last) = c.history.last() else { return true };
        let counterpart = c.history.iter().find(|m| m.performative == "cfp").map(|m| m.sender.as_str());
        let current = self.state.provisional_task.as_ref().map(|p| p.initiator.as_str());
        let pending = self.queue.iter().any(|o| o.conversation == c.id);
        !pending
            && matches!(last.performative.as_str(), "bound" | "retract" | "abort")
            && (counterpart.is_none() || counterpart != current || last.performative == "bound")
    }
}

// ---- conformance ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Participant,
}

/// Check one agent's view of a DynCNET conversation against the protocol's
/// transition tables.
pub fn check_conversation(role: Role, me: &str, history: &[MessageData]) -> Result<(), String> {
    match role {
        Role::Participant => check_participant(me, history),
        Role::Initiator => check_initiator(me, history),
    }
}

fn check_participant(me: &str, history: &[MessageData]) -> Result<(), String> {
    #[derive(Debug, Clone, Copy, PartialEq)]
    enum S {
        Start,
        Open,
        Proposed,
        Accepted,
        Aborted,
        Closed,
        Bound,
    }
    let mut s = S::Start;
    for (i, m) in history.iter().enumerate() {
        let sent = m.sender == me;
        let next = match (s, sent, m.performative.as_str()) {
            (S::Start | S::Closed, false, "cfp") => S::Open,
            (x, false, "cfp") => x,
            (S::Open | S::Proposed, true, "proposal") => S::Proposed,
            (S::Start | S::Open | S::Proposed | S::Closed, false, "provisional-accept") => S::Accepted,
            (S::Accepted, true, "bound") => S::Bound,
            (S::Accepted | S::Aborted, true, "retract") => S::Closed,
            (S::Accepted, false, "abort") => S::Aborted,
            (x @ (S::Closed | S::Bound | S::Open | S::Proposed), false, "abort") => x,
            (x, d, p) => {
                return Err(format!(
                    "entry {i}: {} {p} not allowed in {x:?}",
                    if d { "sending" } else { "receiving" }
                ))
            }
        };
        s = next;
    }
    Ok(())
}

fn check_initiator(me: &str, history: &[MessageData]) -> Result<(), String> {
    #[derive(Debug, Clone, PartialEq)]
    enum S {
        Active,
        Assigned(String),
        Switching(String),
        Executing(String),
    }
    let mut s = S::Active;
    let mut owe_abort: BTreeSet<String> = BTreeSet::new();
    for (i, m) in history.iter().enumerate() {
        let sent = m.sender == me;
        let peer = if sent { m.receiver.clone() } else { m.sender.clone() };
        let perf = m.performative.as_str();
        let winner = match &s {
            S::Assigned(w) | S::Switching(w) | S::Executing(w) => Some(w.clone()),
            S::Active => None,
        };
        let err = |s: &S| Err(format!("entry {i}: {} {perf} ({peer}) not allowed in {s:?}", if sent { "sending" } else { "receiving" }));
        s = match (&s, sent, perf) {
            (x, true, "cfp") | (x, false, "proposal") => x.clone(),
            (S::Active, true, "provisional-accept") => S::Assigned(peer),
            (S::Assigned(w), true, "abort") if *w == peer => S::Switching(w.clone()),
            (x, true, "abort") if owe_abort.remove(&peer) => x.clone(),
            (S::Assigned(w) | S::Switching(w), false, "retract") if *w == peer => S::Active,
            (x, false, "retract") if winner.as_deref() != Some(peer.as_str()) => x.clone(),
            (S::Assigned(w) | S::Switching(w), false, "bound") if *w == peer => S::Executing(w.clone()),
            (x, false, "bound") if winner.as_deref() != Some(peer.as_str()) => {
                owe_abort.insert(peer);
                x.clone()
            }
            (x, _, _) => return err(x),
        };
    }
    Ok(())
}

// ---- exhaustive interleaving check ----------------------------------------

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub latency: u64,
    pub dyn_cfg: DynConfig,
    /// Proposal cost per `(participant, initiator)`.
    pub costs: BTreeMap<(String, String), f64>,
    /// A participant may start its task any time it is intentional and
    /// must have started after this many ticks.
    pub start_within: u64,
    pub tick_limit: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelReport {
    pub states: usize,
    pub completed_runs: usize,
    pub violations: Vec<String>,
    /// Runs that hit the tick limit without every task executing.
    pub unfinished: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct InFlight {
    due: u64,
    from: String,
    to: String,
    msg: DynMsg,
}

#[derive(Debug, Clone, PartialEq)]
struct World {
    tick: u64,
    initiators: Vec<(String, InitiatorState)>,
    participants: Vec<(String, ParticipantState, Option<u64>)>,
    timers_done: Vec<bool>,
    flight: Vec<InFlight>,
    bound_log: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
enum Move {
    Deliver(usize),
    Timer(usize),
    Start(usize),
    Advance,
}

fn key(w: &World) -> String {
    format!("{w:?}")
}

impl World {
    fn timer_due(&self, i: usize, period: u64) -> bool {
        !self.timers_done[i] && self.tick % period == 0
    }

    fn moves(&self, cfg: &ModelConfig) -> Vec<Move> {
        let mut mv = Vec::new();
        let mut heads: BTreeSet<(&str, &str)> = BTreeSet::new();
        let mut mandatory = false;
        for (idx, f) in self.flight.iter().enumerate() {
            if heads.insert((&f.from, &f.to)) && f.due <= self.tick {
                mv.push(Move::Deliver(idx));
                mandatory = true;
            }
        }
        for i in 0..self.initiators.len() {
            if self.timer_due(i, cfg.dyn_cfg.timer_period) {
                mv.push(Move::Timer(i));
                mandatory = true;
            }
        }
        for (i, (_, p, since)) in self.participants.iter().enumerate() {
            if p.phase == ParticipantPhase::Intentional {
                mv.push(Move::Start(i));
                if since.is_some_and(|s| self.tick >= s + cfg.start_within) {
                    mandatory = true;
                }
            }
        }
        if !mandatory {
            mv.push(Move::Advance);
        }
        mv
    }

    fn send(&mut self, from: &str, msgs: Vec<DynMsg>, latency: u64) {
        for m in msgs {
            let targets: Vec<String> = match &m.to {
                Recipient::Agent(a) => vec![a.clone()],
                Recipient::Scope(_) => self.participants.iter().map(|(id, _, _)| id.clone()).collect(),
            };
            for to in targets {
                self.flight.push(InFlight { due: self.tick + latency, from: from.to_string(), to, msg: m.clone() });
            }
        }
    }

    fn participant_moved(&mut self, i: usize, before: ParticipantPhase) {
        let tick = self.tick;
        let (_, p, since) = &mut self.participants[i];
        if p.phase == ParticipantPhase::Intentional && (before != ParticipantPhase::Intentional || since.is_none()) {
            *since = Some(tick);
        }
        if p.phase != ParticipantPhase::Intentional {
            *since = None;
        }
    }

    fn apply(&mut self, mv: &Move, cfg: &ModelConfig) -> Vec<String> {
        let mut violations = Vec::new();
        match mv {
            Move::Advance => {
                self.tick += 1;
                self.timers_done.iter_mut().for_each(|d| *d = false);
            }
            Move::Timer(i) => {
                self.timers_done[*i] = true;
                let ev = if self.tick == 0 { InitiatorEvent::TaskReady } else { InitiatorEvent::TimerFired };
                let t = initiator_step(&self.initiators[*i].1, &ev, &cfg.dyn_cfg);
                let me = self.initiators[*i].0.clone();
                self.initiators[*i].1 = t.state;
                self.send(&me, t.out, cfg.latency);
            }
            Move::Start(i) => {
                let before = self.participants[*i].1.phase;
                let t = participant_step(&self.participants[*i].1, &ParticipantEvent::TaskStarted, &cfg.dyn_cfg);
                let me = self.participants[*i].0.clone();
                if let Some(task) = t.state.provisional_task.as_ref() {
                    self.bound_log.push((me.clone(), task.initiator.clone()));
                }
                self.participants[*i].1 = t.state;
                self.participant_moved(*i, before);
                self.send(&me, t.out, cfg.latency);
            }
            Move::Deliver(idx) => {
                let f = self.flight.remove(*idx);
                if let Some(i) = self.initiators.iter().position(|(id, _)| *id == f.to) {
                    let ev = match f.msg.perf {
                        Perf::Proposal(cost) => InitiatorEvent::ProposalReceived { agv: f.from.clone(), cost },
                        Perf::Bound => InitiatorEvent::BoundReceived { agv: f.from.clone() },
                        Perf::Retract => InitiatorEvent::RetractReceived { agv: f.from.clone() },
                        _ => return vec![format!("initiator {} got {:?}", f.to, f.msg.perf)],
                    };
                    let t = initiator_step(&self.initiators[i].1, &ev, &cfg.dyn_cfg);
                    if let Some(v) = t.violation {
                        violations.push(v);
                    }
                    self.initiators[i].1 = t.state;
                    self.send(&f.to, t.out, cfg.latency);
                } else if let Some(i) = self.participants.iter().position(|(id, _, _)| *id == f.to) {
                    let ev = match f.msg.perf {
                        Perf::Cfp => {
                            let cost = cfg.costs.get(&(f.to.clone(), f.from.clone())).copied().unwrap_or(f64::INFINITY);
                            ParticipantEvent::CfpReceived { initiator: f.from.clone(), cost }
                        }
                        Perf::ProvisionalAccept => {
                            ParticipantEvent::ProvisionalAcceptReceived { initiator: f.from.clone(), task_id: f.msg.task_id.clone() }
                        }
                        Perf::Abort => ParticipantEvent::AbortReceived { initiator: f.from.clone() },
                        _ => return vec![format!("participant {} got {:?}", f.to, f.msg.perf)],
                    };
                    let before = self.participants[i].1.phase;
                    let t = participant_step(&self.participants[i].1, &ev, &cfg.dyn_cfg);
                    self.participants[i].1 = t.state;
                    self.participant_moved(i, before);
                    self.send(&f.to, t.out, cfg.latency);
                }
            }
        }
        violations.extend(self.safety());
        violations
    }

    fn safety(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut per_task: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut per_agv: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (agv, task) in &self.bound_log {
            per_task.entry(task).or_default().insert(agv);
            per_agv.entry(agv).or_default().insert(task);
        }
        for (task, agvs) in per_task {
            if agvs.len() > 1 {
                v.push(format!("task {task} bound to {agvs:?}"));
            }
        }
        for (agv, tasks) in per_agv {
            if tasks.len() > 1 {
                v.push(format!("{agv} bound to {tasks:?}"));
            }
        }
        // The initiator's view must agree with who is bound.
        for (id, s) in &self.initiators {
            if s.phase == InitiatorPhase::Executing {
                let w = s.provisional_winner.as_deref().unwrap_or_default();
                if !self.bound_log.iter().any(|(a, t)| a == w && t == id) {
                    v.push(format!("{id} executing with {w}, which never bound"));
                }
            }
        }
        v
    }

    fn done(&self) -> bool {
        self.initiators.iter().all(|(_, s)| s.phase == InitiatorPhase::Executing)
    }
}

/// Explore every order of same-tick events (keeping per-channel FIFO) for
/// the initiators and participants named in `cfg.costs`.
pub fn model_check(cfg: &ModelConfig) -> ModelReport {
    let initiators: BTreeSet<&String> = cfg.costs.keys().map(|(_, i)| i).collect();
    let participants: BTreeSet<&String> = cfg.costs.keys().map(|(p, _)| p).collect();
    let mut start = World {
        tick: 0,
        initiators: initiators
            .iter()
            .map(|id| {
                let task = TaskInfo { task_id: id.to_string(), kind: "regular".into(), priority: 1, location: Vertex::from("x") };
                (id.to_string(), InitiatorState::new(task))
            })
            .collect(),
        participants: participants.iter().map(|id| (id.to_string(), ParticipantState::new(), None)).collect(),
        timers_done: vec![false; initiators.len()],
        flight: Vec::new(),
        bound_log: Vec::new(),
    };
    for (_, p, _) in start.participants.iter_mut() {
        *p = participant_step(p, &ParticipantEvent::ReadyToWork, &cfg.dyn_cfg).state;
    }
    let mut report = ModelReport::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut stack = vec![start];
    while let Some(w) = stack.pop() {
        if !seen.insert(key(&w)) {
            continue;
        }
        report.states += 1;
        if w.done() {
            report.completed_runs += 1;
            continue;
        }
        if w.tick > cfg.tick_limit {
            report.unfinished += 1;
            continue;
        }
        for mv in w.moves(cfg) {
            let mut next = w.clone();
            let v = next.apply(&mv, cfg);
            if !v.is_empty() {
                report.violations.extend(v.into_iter().map(|s| format!("tick {}: {s}", w.tick)));
                continue;
            }
            stack.push(next);
        }
    }
    report.violations.sort();
    report.violations.dedup();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DynConfig {
        DynConfig { delta: 50.0, timer_period: 10, scope_unit: 20.0 }
    }

    fn task() -> InitiatorState {
        InitiatorState::new(TaskInfo { task_id: "t1".into(), kind: "regular".into(), priority: 5, location: "n60".into() })
    }

    fn run_i(s: InitiatorState, evs: &[InitiatorEvent]) -> (InitiatorState, Vec<DynMsg>) {
        let mut s = s;
        let mut out = Vec::new();
        for e in evs {
            let t = initiator_step(&s, e, &cfg());
            s = t.state;
            out.extend(t.out);
        }
        (s, out)
    }

    fn prop(a: &str, c: f64) -> InitiatorEvent {
        InitiatorEvent::ProposalReceived { agv: a.into(), cost: c }
    }

    #[test]
    fn min_cost_wins() {
        let (s, out) = run_i(task(), &[InitiatorEvent::TaskReady, prop("a1", 300.0), prop("a2", 200.0), InitiatorEvent::TimerFired]);
        assert_eq!(s.phase, InitiatorPhase::Assigned);
        assert_eq!(s.provisional_winner.as_deref(), Some("a2"));
        assert_eq!(out[0].to, Recipient::Scope(100.0));
        assert_eq!(out.last().unwrap().perf, Perf::ProvisionalAccept);
        assert_eq!(out.last().unwrap().to, Recipient::Agent("a2".into()));
    }

    #[test]
    fn bound_then_proposals_ignored() {
        let (s, _) = run_i(
            task(),
            &[InitiatorEvent::TaskReady, prop("a1", 300.0), InitiatorEvent::TimerFired, InitiatorEvent::BoundReceived { agv: "a1".into() }],
        );
        assert_eq!(s.phase, InitiatorPhase::Executing);
        let (s2, out) = run_i(s.clone(), &[prop("a2", 1.0)]);
        assert_eq!(s2, s);
        assert!(out.is_empty());
    }

    #[test]
    fn switch_handshake() {
        let (s, _) = run_i(task(), &[InitiatorEvent::TaskReady, prop("a1", 300.0), InitiatorEvent::TimerFired]);
        // Improvement below delta: no switch.
        let (s1, out) = run_i(s.clone(), &[prop("a2", 260.0)]);
        assert!(out.is_empty());
        assert!(s1.switching_to.is_none());
        let (s2, out) = run_i(s, &[prop("a2", 200.0)]);
        assert_eq!(out, vec![DynMsg { to: Recipient::Agent("a1".into()), perf: Perf::Abort, task_id: "t1".into() }]);
        let (s3, out) = run_i(s2.clone(), &[InitiatorEvent::RetractReceived { agv: "a1".into() }]);
        assert_eq!(s3.provisional_winner.as_deref(), Some("a2"));
        assert_eq!(out[0].perf, Perf::ProvisionalAccept);
        // A bound crossing the abort is honored.
        let (s4, _) = run_i(s2, &[InitiatorEvent::BoundReceived { agv: "a1".into() }]);
        assert_eq!(s4.phase, InitiatorPhase::Executing);
        assert_eq!(s4.provisional_winner.as_deref(), Some("a1"));
    }

    #[test]
    fn bound_from_stranger_is_aborted() {
        let (s, _) = run_i(task(), &[InitiatorEvent::TaskReady, prop("a1", 300.0), InitiatorEvent::TimerFired]);
        let t = initiator_step(&s, &InitiatorEvent::BoundReceived { agv: "a9".into() }, &cfg());
        assert!(t.violation.is_some());
        assert_eq!(t.state, s);
        assert_eq!(t.out[0].perf, Perf::Abort);
    }

    #[test]
    fn winner_leaving_reopens() {
        let (s, _) = run_i(task(), &[InitiatorEvent::TaskReady, prop("a1", 100.0), prop("a2", 200.0), InitiatorEvent::TimerFired]);
        let (s, _) = run_i(s, &[InitiatorEvent::AgvInOutScope { agv: "a1".into(), inside: false }]);
        assert_eq!(s.phase, InitiatorPhase::Active);
        let (s, out) = run_i(s, &[InitiatorEvent::TimerFired]);
        assert_eq!(s.provisional_winner.as_deref(), Some("a2"));
        assert_eq!(out[0].perf, Perf::ProvisionalAccept);
    }

    fn run_p(evs: &[ParticipantEvent]) -> (ParticipantState, Vec<DynMsg>) {
        let mut s = ParticipantState::new();
        let mut out = Vec::new();
        for e in evs {
            let t = participant_step(&s, e, &cfg());
            s = t.state;
            out.extend(t.out);
        }
        (s, out)
    }

    #[test]
    fn participant_proposes_distance() {
        let (_, out) = run_p(&[ParticipantEvent::ReadyToWork, ParticipantEvent::CfpReceived { initiator: "t".into(), cost: 250.0 }]);
        assert_eq!(out[0].perf, Perf::Proposal(250.0));
    }

    #[test]
    fn participant_switches_on_better_offer() {
        let accept = |i: &str| ParticipantEvent::ProvisionalAcceptReceived { initiator: i.into(), task_id: i.into() };
        let (s, out) = run_p(&[
            ParticipantEvent::ReadyToWork,
            ParticipantEvent::CfpReceived { initiator: "t1".into(), cost: 300.0 },
            ParticipantEvent::CfpReceived { initiator: "t2".into(), cost: 200.0 },
            accept("t1"),
            accept("t2"),
        ]);
        assert_eq!(s.provisional_task.unwrap().initiator, "t2");
        assert_eq!(out.last().unwrap(), &DynMsg { to: Recipient::Agent("t1".into()), perf: Perf::Retract, task_id: "t1".into() });
    }

    #[test]
    fn participant_abort_and_bound() {
        let accept = ParticipantEvent::ProvisionalAcceptReceived { initiator: "t1".into(), task_id: "t1".into() };
        let base = [ParticipantEvent::ReadyToWork, ParticipantEvent::CfpReceived { initiator: "t1".into(), cost: 5.0 }, accept];
        let mut evs = base.to_vec();
        evs.push(ParticipantEvent::AbortReceived { initiator: "t1".into() });
        let (s, _) = run_p(&evs);
        assert_eq!(s.phase, ParticipantPhase::Voting);
        assert!(s.provisional_task.is_none());
        let mut evs = base.to_vec();
        evs.push(ParticipantEvent::TaskStarted);
        evs.push(ParticipantEvent::AbortReceived { initiator: "t1".into() });
        let (s, out) = run_p(&evs);
        assert_eq!(s.phase, ParticipantPhase::Bound);
        assert_eq!(out.last().unwrap().perf, Perf::Bound);
    }

    #[test]
    fn tiny_model_is_safe() {
        let costs = [(("a1", "t1"), 100.0), (("a2", "t1"), 200.0)]
            .into_iter()
            .map(|((a, t), c)| ((a.to_string(), t.to_string()), c))
            .collect();
        let r = model_check(&ModelConfig {
            latency: 1,
            dyn_cfg: DynConfig { delta: 50.0, timer_period: 2, scope_unit: 20.0 },
            costs,
            start_within: 1,
            tick_limit: 30,
        });
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.unfinished, 0);
        assert!(r.completed_runs > 0);
    }
}
