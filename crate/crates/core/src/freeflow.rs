//! Behavior-based action selection: roles as free-flow trees, situated
//! commitments that move activity between roles, and the second selection
//! step that turns a high-level action into a concrete one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::env::Action;
use crate::graph::{GraphPath, OperatingSpace, SegmentGraph, Vertex};
use crate::value::{Knowledge, Value};

pub type StimulusFn = Arc<dyn Fn(&Knowledge) -> f64 + Send + Sync>;
pub type ConditionFn = Arc<dyn Fn(&Knowledge) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Internal,
    Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: u32,
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Clone)]
pub struct Stimulus {
    pub name: String,
    pub target: u32,
    pub value: StimulusFn,
}

impl fmt::Debug for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Stimulus({} -> {})", self.name, self.target)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FreeFlowError {
    #[error("duplicate node id {0}")]
    DuplicateNode(u32),
    #[error("unknown node id {0}")]
    UnknownNode(u32),
    #[error("negative weight on edge {0} -> {1}")]
    NegativeWeight(u32, u32),
    #[error("cycle through node {0}")]
    Cycle(u32),
    #[error("action node {0} has children")]
    ActionNotLeaf(u32),
    #[error("role {0} must have exactly one top node, found {1}")]
    Roots(String, usize),
    #[error("role {0} has no action leaves")]
    NoActions(String),
    #[error("unknown role {0}")]
    UnknownRole(String),
    #[error("commitment {0} targets one of its own source roles")]
    SelfCommitment(String),
}

/// One role: a rooted DAG whose leaves are actions.
#[derive(Debug, Clone)]
pub struct FreeFlowTree {
    role: String,
    root_weight: f64,
    top: u32,
    nodes: BTreeMap<u32, TreeNode>,
    /// Children per parent, with edge weights.
    children: BTreeMap<u32, Vec<(u32, f64)>>,
    /// Nodes in an order where every parent precedes its children.
    order: Vec<u32>,
    stimuli: Vec<Stimulus>,
}

#[derive(Debug, Clone)]
pub struct TreeBuilder {
    role: String,
    root_weight: f64,
    nodes: Vec<TreeNode>,
    edges: Vec<(u32, u32, f64)>,
    stimuli: Vec<Stimulus>,
}

impl TreeBuilder {
    /// `root_weight` weighs the edge from the global activity source to
    /// this role's top node.
    pub fn new(role: impl Into<String>, root_weight: f64) -> Self {
        TreeBuilder { role: role.into(), root_weight, nodes: Vec::new(), edges: Vec::new(), stimuli: Vec::new() }
    }

    pub fn internal(mut self, id: u32, name: &str) -> Self {
        self.nodes.push(TreeNode { id, name: name.to_string(), kind: NodeKind::Internal });
        self
    }

    pub fn action(mut self, id: u32, name: &str) -> Self {
        self.nodes.push(TreeNode { id, name: name.to_string(), kind: NodeKind::Action });
        self
    }

    pub fn edge(mut self, parent: u32, child: u32, weight: f64) -> Self {
        self.edges.push((parent, child, weight));
        self
    }

    pub fn stimulus(mut self, name: &str, target: u32, f: impl Fn(&Knowledge) -> f64 + Send + Sync + 'static) -> Self {
        self.stimuli.push(Stimulus { name: name.to_string(), target, value: Arc::new(f) });
        self
    }

    pub fn build(self) -> Result<FreeFlowTree, FreeFlowError> {
        let mut nodes = BTreeMap::new();
        for n in self.nodes {
            let id = n.id;
            if nodes.insert(id, n).is_some() {
                return Err(FreeFlowError::DuplicateNode(id));
            }
        }
        if self.root_weight < 0.0 {
            return Err(FreeFlowError::NegativeWeight(u32::MAX, u32::MAX));
        }
        let mut children: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
        let mut indegree: BTreeMap<u32, usize> = nodes.keys().map(|k| (*k, 0)).collect();
        for (p, c, w) in &self.edges {
            for id in [p, c] {
                if !nodes.contains_key(id) {
                    return Err(FreeFlowError::UnknownNode(*id));
                }
            }
            if !(*w >= 0.0) {
                return Err(FreeFlowError::NegativeWeight(*p, *c));
            }
            if nodes[p].kind == NodeKind::Action {
                return Err(FreeFlowError::ActionNotLeaf(*p));
            }
            children.entry(*p).or_default().push((*c, *w));
            *indegree.get_mut(c).expect("checked") += 1;
        }
        for s in &self.stimuli {
            if !nodes.contains_key(&s.target) {
                return Err(FreeFlowError::UnknownNode(s.target));
            }
        }
        let roots: Vec<u32> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        if roots.len() != 1 {
            return Err(FreeFlowError::Roots(self.role, roots.len()));
        }
        // Kahn's algorithm; leftovers sit on a cycle.
        let mut order = Vec::with_capacity(nodes.len());
        let mut ready = roots.clone();
        let mut indeg = indegree.clone();
        while let Some(n) = ready.pop() {
            order.push(n);
            for (c, _) in children.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indeg.get_mut(c).expect("known");
                *d -= 1;
                if *d == 0 {
                    ready.push(*c);
                }
            }
        }
        if order.len() != nodes.len() {
            let stuck = indeg.iter().find(|(_, d)| **d > 0).map(|(k, _)| *k).unwrap_or(0);
            return Err(FreeFlowError::Cycle(stuck));
        }
        if !nodes.values().any(|n| n.kind == NodeKind::Action) {
            return Err(FreeFlowError::NoActions(self.role));
        }
        Ok(FreeFlowTree {
            role: self.role,
            root_weight: self.root_weight,
            top: roots[0],
            nodes,
            children,
            order,
            stimuli: self.stimuli,
        })
    }
}

impl FreeFlowTree {
    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn top(&self) -> u32 {
        self.top
    }

    pub fn root_weight(&self) -> f64 {
        self.root_weight
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn children(&self, id: u32) -> &[(u32, f64)] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stimuli(&self) -> &[Stimulus] {
        &self.stimuli
    }
}

/// Activity transfer from source roles to a target role while `condition`
/// holds.
#[derive(Clone)]
pub struct SituatedCommitment {
    pub name: String,
    pub sources: BTreeSet<String>,
    pub target: String,
    pub condition: ConditionFn,
    pub context: String,
}

impl fmt::Debug for SituatedCommitment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Commitment({}: {:?} -> {})", self.name, self.sources, self.target)
    }
}

impl SituatedCommitment {
    pub fn new(
        name: &str,
        sources: &[&str],
        target: &str,
        condition: impl Fn(&Knowledge) -> bool + Send + Sync + 'static,
    ) -> Self {
        SituatedCommitment {
            name: name.to_string(),
            sources: sources.iter().map(|s| s.to_string()).collect(),
            target: target.to_string(),
            condition: Arc::new(condition),
            context: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivityAssignment {
    pub per_node: BTreeMap<u32, f64>,
    /// Action leaves and their names.
    pub actions: BTreeMap<u32, String>,
}

impl ActivityAssignment {
    pub fn of(&self, id: u32) -> f64 {
        self.per_node.get(&id).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub node: u32,
    pub name: String,
    pub activity: f64,
    pub external: bool,
}

/// Roles and commitments of one agent, with the stimulus values and
/// commitment outcomes last read from knowledge.
#[derive(Debug, Clone)]
pub struct ActionSelector {
    roles: Vec<FreeFlowTree>,
    commitments: Vec<SituatedCommitment>,
    stimulus_values: Vec<Vec<f64>>,
    active: Vec<bool>,
}

impl ActionSelector {
    pub fn new(roles: Vec<FreeFlowTree>, commitments: Vec<SituatedCommitment>) -> Result<Self, FreeFlowError> {
        let mut seen = BTreeSet::new();
        for r in &roles {
            for n in r.nodes() {
                if !seen.insert(n.id) {
                    return Err(FreeFlowError::DuplicateNode(n.id));
                }
            }
        }
        let names: BTreeSet<&str> = roles.iter().map(FreeFlowTree::role).collect();
        for c in &commitments {
            for r in c.sources.iter().chain(std::iter::once(&c.target)) {
                if !names.contains(r.as_str()) {
                    return Err(FreeFlowError::UnknownRole(r.clone()));
                }
            }
            if c.sources.contains(&c.target) {
                return Err(FreeFlowError::SelfCommitment(c.name.clone()));
            }
        }
        let stimulus_values = roles.iter().map(|r| vec![0.0; r.stimuli.len()]).collect();
        let active = vec![false; commitments.len()];
        Ok(ActionSelector { roles, commitments, stimulus_values, active })
    }

    pub fn roles(&self) -> &[FreeFlowTree] {
        &self.roles
    }

    /// Refresh stimulus inputs from knowledge. Negative values count as 0.
    pub fn update_roles(&mut self, k: &Knowledge) {
        for (r, vals) in self.roles.iter().zip(self.stimulus_values.iter_mut()) {
            for (s, v) in r.stimuli.iter().zip(vals.iter_mut()) {
                *v = (s.value)(k).max(0.0);
            }
        }
    }

    pub fn update_commitments(&mut self, k: &Knowledge) {
        for (c, a) in self.commitments.iter().zip(self.active.iter_mut()) {
            *a = (c.condition)(k);
        }
    }

    pub fn active_commitments(&self) -> impl Iterator<Item = &str> {
        self.commitments.iter().zip(&self.active).filter(|(_, a)| **a).map(|(c, _)| c.name.as_str())
    }

    /// Propagate `root` activity through every role using the inputs of the
    /// last update.
    pub fn assignment(&self, root: f64) -> ActivityAssignment {
        let mut out = ActivityAssignment::default();
        // Stimulus sums per target node.
        let mut boost: BTreeMap<u32, f64> = BTreeMap::new();
        for (r, vals) in self.roles.iter().zip(&self.stimulus_values) {
            for (s, v) in r.stimuli.iter().zip(vals) {
                *boost.entry(s.target).or_default() += v;
            }
        }
        let boost_of = |id: u32| boost.get(&id).copied().unwrap_or(0.0);
        // Phase 1: top nodes.
        let mut top: BTreeMap<&str, f64> = BTreeMap::new();
        for r in &self.roles {
            top.insert(&r.role, root * r.root_weight + boost_of(r.top));
        }
        // Phase 2: commitments, from post-phase-1 source activity.
        let mut transfer: BTreeMap<&str, f64> = BTreeMap::new();
        for (c, active) in self.commitments.iter().zip(&self.active) {
            if *active {
                let amount: f64 = c.sources.iter().map(|s| top.get(s.as_str()).copied().unwrap_or(0.0)).sum();
                *transfer.entry(&c.target).or_default() += amount;
            }
        }
        // Phase 3: downward flow.
        for r in &self.roles {
            let mut act: BTreeMap<u32, f64> = BTreeMap::new();
            act.insert(r.top, top[r.role.as_str()] + transfer.get(r.role.as_str()).copied().unwrap_or(0.0));
            for n in &r.order {
                if *n != r.top {
                    *act.entry(*n).or_default() += boost_of(*n);
                }
                let a = act[n];
                for (c, w) in r.children(*n) {
                    *act.entry(*c).or_default() += a * w;
                }
            }
            for node in r.nodes.values() {
                if node.kind == NodeKind::Action {
                    out.actions.insert(node.id, node.name.clone());
                }
            }
            out.per_node.extend(act);
        }
        out
    }
}

/// Single-pass propagation: stimuli and commitment conditions are read
/// from `knowledge`, then activity flows top-down.
pub fn propagate(
    roles: &[FreeFlowTree],
    commitments: &[SituatedCommitment],
    root: f64,
    knowledge: &Knowledge,
) -> Result<ActivityAssignment, FreeFlowError> {
    let mut sel = ActionSelector::new(roles.to_vec(), commitments.to_vec())?;
    sel.update_roles(knowledge);
    sel.update_commitments(knowledge);
    Ok(sel.assignment(root))
}

/// The action leaf with the highest activity; ties go to the smallest id.
pub fn select_action(assignment: &ActivityAssignment, external: &BTreeSet<String>) -> Option<Selection> {
    assignment
        .actions
        .iter()
        .map(|(id, name)| (*id, name, assignment.of(*id)))
        .fold(None::<(u32, &String, f64)>, |best, cur| match best {
            Some(b) if b.2 >= cur.2 => Some(b),
            _ => Some(cur),
        })
        .map(|(node, name, activity)| Selection { node, name: name.clone(), activity, external: external.contains(name) })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    Act(Action),
    /// No concrete action this cycle, with the reason.
    Skip(String),
}

/// Second selection step. Knowledge items used: `position`, `route` (the
/// path being followed), `operatingSpace`, `taskPickup`, `taskDropoff`,
/// `currentIntention`.
pub fn refine_action(high: &str, agent: &str, k: &Knowledge, graph: &SegmentGraph) -> Refinement {
    let node = |name: &str| k.get(name).and_then(Value::as_node).cloned();
    match high {
        "move" => {
            let Some(pos) = node("position") else { return Refinement::Skip("position unknown".into()) };
            let Some(route) = k.get("route").and_then(Value::as_path) else {
                return Refinement::Skip("no route".into());
            };
            let Some(os) = (match k.get("operatingSpace") {
                Some(Value::OperatingSpace(os)) => Some(os),
                _ => None,
            }) else {
                return Refinement::Skip("no operating space".into());
            };
            refine_move(agent, &pos, route, os, graph)
        }
        "pick" | "drop" => {
            let item = if high == "pick" { "taskPickup" } else { "taskDropoff" };
            match node(item) {
                Some(n) => Refinement::Act(Action::new(agent, high).with("node", n)),
                None => Refinement::Skip(format!("no {item}")),
            }
        }
        "instructDriver" => match k.get("currentIntention").and_then(Value::as_path) {
            Some(p) => Refinement::Act(Action::new(agent, high).with("path", p.clone())),
            None => Refinement::Skip("no current intention".into()),
        },
        other => Refinement::Act(Action::new(agent, other)),
    }
}

fn refine_move(agent: &str, pos: &Vertex, route: &GraphPath, os: &OperatingSpace, graph: &SegmentGraph) -> Refinement {
    let Some(i) = route.nodes.iter().position(|n| n == pos) else {
        return Refinement::Skip("position not on route".into());
    };
    let Some(next) = route.nodes.get(i + 1) else { return Refinement::Skip("route complete".into()) };
    let Some(segment) = graph.edge_between(pos, next) else {
        return Refinement::Skip(format!("no segment {pos}>{next}"));
    };
    if os.is_locked(segment) {
        Refinement::Act(Action::new(agent, "move").with("segment", Value::Edge(segment)).with("to", next.clone()))
    } else {
        Refinement::Skip(format!("segment {segment} not locked"))
    }
}
