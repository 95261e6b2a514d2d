//! Segment graphs shared by both scenarios: nodes joined by metered edges,
//! simple paths over them, and the path-projection types used for locking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vertex(pub String);

impl Vertex {
    pub fn new(id: impl Into<String>) -> Self {
        Vertex(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Vertex {
    fn from(s: &str) -> Self {
        Vertex(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub from: Vertex,
    pub to: Vertex,
    pub length: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(Vertex),
    #[error("duplicate node {0}")]
    DuplicateNode(Vertex),
    #[error("duplicate edge id {0}")]
    DuplicateEdge(EdgeId),
    #[error("edge {0} has non-positive length {1}")]
    BadLength(EdgeId, f64),
    #[error("edge {0} is a self loop")]
    SelfLoop(EdgeId),
    #[error("edge {0} duplicates an existing connection between {1} and {2}")]
    ParallelEdge(EdgeId, Vertex, Vertex),
    #[error("no candidate paths")]
    NoCandidatePaths,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Undirected (default) or directed graph of segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGraph {
    directed: bool,
    nodes: BTreeSet<Vertex>,
    edges: BTreeMap<EdgeId, Edge>,
    // Outgoing (edge, neighbor) pairs, sorted by neighbor then edge id.
    adjacency: BTreeMap<Vertex, Vec<(EdgeId, Vertex)>>,
}

impl SegmentGraph {
    pub fn new(directed: bool) -> Self {
        SegmentGraph {
            directed,
            nodes: BTreeSet::new(),
            edges: BTreeMap::new(),
            adjacency: BTreeMap::new(),
        }
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn add_node(&mut self, v: impl Into<Vertex>) -> Result<(), GraphError> {
        let v = v.into();
        if !self.nodes.insert(v.clone()) {
            return Err(GraphError::DuplicateNode(v));
        }
        self.adjacency.insert(v, Vec::new());
        Ok(())
    }

    pub fn add_edge(
        &mut self,
        id: u32,
        from: impl Into<Vertex>,
        to: impl Into<Vertex>,
        length: f64,
    ) -> Result<(), GraphError> {
        let id = EdgeId(id);
        let (from, to) = (from.into(), to.into());
        if self.edges.contains_key(&id) {
            return Err(GraphError::DuplicateEdge(id));
        }
        for v in [&from, &to] {
            if !self.nodes.contains(v) {
                return Err(GraphError::UnknownNode(v.clone()));
            }
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(GraphError::BadLength(id, length));
        }
        if from == to {
            return Err(GraphError::SelfLoop(id));
        }
        if self.edge_between(&from, &to).is_some() {
            return Err(GraphError::ParallelEdge(id, from, to));
        }
        self.edges.insert(id, Edge { id, from: from.clone(), to: to.clone(), length });
        self.push_adjacent(&from, id, &to);
        if !self.directed {
            self.push_adjacent(&to, id, &from);
        }
        Ok(())
    }

    fn push_adjacent(&mut self, at: &Vertex, id: EdgeId, other: &Vertex) {
        let list = self.adjacency.entry(at.clone()).or_default();
        list.push((id, other.clone()));
        list.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Vertex> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        self.nodes.contains(v)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.edges.get(&id)
    }

    /// Outgoing `(edge, neighbor)` pairs of `v`, ordered by neighbor id.
    pub fn neighbors(&self, v: &Vertex) -> &[(EdgeId, Vertex)] {
        self.adjacency.get(v).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The edge traversable from `a` to `b`, if any.
    pub fn edge_between(&self, a: &Vertex, b: &Vertex) -> Option<EdgeId> {
        self.neighbors(a).iter().find(|(_, n)| n == b).map(|(e, _)| *e)
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.values().map(|e| e.length).sum::<f64>() / self.edges.len() as f64
    }

    /// Total length of `path`, or `None` if consecutive nodes are not adjacent.
    pub fn path_length(&self, path: &GraphPath) -> Option<f64> {
        let mut total = 0.0;
        for pair in path.nodes.windows(2) {
            let e = self.edge_between(&pair[0], &pair[1])?;
            total += self.edges[&e].length;
        }
        Some(total)
    }

    /// Edge ids traversed by `path`, in order.
    pub fn path_edges(&self, path: &GraphPath) -> Option<Vec<EdgeId>> {
        path.nodes.windows(2).map(|p| self.edge_between(&p[0], &p[1])).collect()
    }

    /// True if `path` is a simple walk (no repeated node) over existing edges.
    pub fn is_valid_path(&self, path: &GraphPath) -> bool {
        let unique: BTreeSet<&Vertex> = path.nodes.iter().collect();
        !path.nodes.is_empty()
            && unique.len() == path.nodes.len()
            && path.nodes.iter().all(|v| self.contains(v))
            && self.path_edges(path).is_some()
    }

    fn check(&self, v: &Vertex) -> Result<(), GraphError> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(v.clone()))
        }
    }

    /// All simple paths from `from` to `to` no longer than `max_dist`,
    /// ordered by (length, node sequence).
    pub fn paths_within(&self, from: &Vertex, to: &Vertex, max_dist: f64) -> Result<Vec<GraphPath>, GraphError> {
        self.check(from)?;
        self.check(to)?;
        let mut found: Vec<(f64, GraphPath)> = Vec::new();
        let mut stack = vec![from.clone()];
        let mut on_path: BTreeSet<Vertex> = [from.clone()].into();
        self.collect_paths(to, max_dist, 0.0, &mut stack, &mut on_path, &mut found);
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.nodes.cmp(&b.1.nodes)));
        Ok(found.into_iter().map(|(_, p)| p).collect())
    }

    fn collect_paths(
        &self,
        target: &Vertex,
        max_dist: f64,
        so_far: f64,
        stack: &mut Vec<Vertex>,
        on_path: &mut BTreeSet<Vertex>,
        found: &mut Vec<(f64, GraphPath)>,
    ) {
        let here = stack.last().expect("non-empty stack").clone();
        if &here == target {
            found.push((so_far, GraphPath::new(stack.clone())));
            return;
        }
        for (e, next) in self.neighbors(&here) {
            let len = so_far + self.edges[e].length;
            if len > max_dist || on_path.contains(next) {
                continue;
            }
            stack.push(next.clone());
            on_path.insert(next.clone());
            self.collect_paths(target, max_dist, len, stack, on_path, found);
            on_path.remove(next);
            stack.pop();
        }
    }

    /// Shortest-path distance; `f64::INFINITY` when unreachable.
    pub fn distance(&self, from: &Vertex, to: &Vertex) -> Result<f64, GraphError> {
        self.check(from)?;
        self.check(to)?;
        Ok(self.dijkstra(from).remove(to).unwrap_or(f64::INFINITY))
    }

    /// Distances from `from` to every reachable node.
    pub fn distances_from(&self, from: &Vertex) -> Result<BTreeMap<Vertex, f64>, GraphError> {
        self.check(from)?;
        Ok(self.dijkstra(from))
    }

    fn dijkstra(&self, from: &Vertex) -> BTreeMap<Vertex, f64> {
        #[derive(PartialEq)]
        struct Item(f64, Vertex);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
            }
        }

        let mut dist: BTreeMap<Vertex, f64> = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(from.clone(), 0.0);
        heap.push(Item(0.0, from.clone()));
        while let Some(Item(d, v)) = heap.pop() {
            if d > dist[&v] {
                continue;
            }
            for (e, n) in self.neighbors(&v) {
                let nd = d + self.edges[e].length;
                if dist.get(n).is_none_or(|&old| nd < old) {
                    dist.insert(n.clone(), nd);
                    heap.push(Item(nd, n.clone()));
                }
            }
        }
        dist
    }

    /// One shortest path between two nodes (lexicographically smallest on ties).
    pub fn shortest_route(&self, from: &Vertex, to: &Vertex) -> Result<Option<GraphPath>, GraphError> {
        let d = self.distance(from, to)?;
        if !d.is_finite() {
            return Ok(None);
        }
        // Enumerate only the minimal paths; relative slack absorbs summation order.
        let paths = self.paths_within(from, to, d * (1.0 + 1e-9) + 1e-9)?;
        Ok(shortest_path(&paths, self).ok())
    }

    /// Write the graph in the line-oriented graph file format.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("graph {}\n", if self.directed { "directed" } else { "undirected" });
        for v in &self.nodes {
            out.push_str(&format!("node {v}\n"));
        }
        for e in self.edges.values() {
            out.push_str(&format!("edge {} {} {} {}\n", e.id, e.from, e.to, e.length));
        }
        out
    }

    /// Parse the graph file format: a `graph <directed|undirected>` header,
    /// then `node <id>` and `edge <id> <from> <to> <lengthMeters>` lines.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut graph: Option<SegmentGraph> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let err = |reason: &str| GraphError::Parse { line, reason: reason.to_string() };
            let Some(g) = graph.as_mut() else {
                match fields.as_slice() {
                    ["graph", "directed"] => graph = Some(SegmentGraph::new(true)),
                    ["graph", "undirected"] => graph = Some(SegmentGraph::new(false)),
                    _ => return Err(err("expected header `graph <directed|undirected>`")),
                }
                continue;
            };
            match fields.as_slice() {
                ["node", id] => g.add_node(*id).map_err(|e| err(&e.to_string()))?,
                ["edge", id, from, to, len] => {
                    let id: u32 = id.parse().map_err(|_| err("edge id must be a non-negative integer"))?;
                    let len: f64 = len.parse().map_err(|_| err("edge length must be a number"))?;
                    g.add_edge(id, *from, *to, len).map_err(|e| err(&e.to_string()))?;
                }
                _ => return Err(err("expected `node <id>` or `edge <id> <from> <to> <length>`")),
            }
        }
        graph.ok_or(GraphError::Parse { line: 0, reason: "missing graph header".into() })
    }
}

/// Shortest path in `paths`; ties go to the lexicographically smallest node sequence.
pub fn shortest_path(paths: &[GraphPath], graph: &SegmentGraph) -> Result<GraphPath, GraphError> {
    paths
        .iter()
        .map(|p| (graph.path_length(p).unwrap_or(f64::INFINITY), p))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.nodes.cmp(&b.1.nodes)))
        .map(|(_, p)| p.clone())
        .ok_or(GraphError::NoCandidatePaths)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GraphPath {
    pub nodes: Vec<Vertex>,
}

impl GraphPath {
    pub fn new(nodes: Vec<Vertex>) -> Self {
        GraphPath { nodes }
    }

    pub fn from_strs(nodes: &[&str]) -> Self {
        GraphPath { nodes: nodes.iter().map(|s| Vertex::from(*s)).collect() }
    }

    pub fn start(&self) -> Option<&Vertex> {
        self.nodes.first()
    }

    pub fn end(&self) -> Option<&Vertex> {
        self.nodes.last()
    }

    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

impl fmt::Display for GraphPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.nodes.iter().map(Vertex::as_str).collect();
        f.write_str(&parts.join(">"))
    }
}

/// Physical footprint of a vehicle as a set of occupied segments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hull {
    pub segments: BTreeSet<EdgeId>,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProjectionStatus {
    Requested,
    Locked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProjection {
    pub id: u64,
    pub priority: u8,
    pub hull: Hull,
    pub projection: Vec<EdgeId>,
    pub status: ProjectionStatus,
}

impl PathProjection {
    /// Every segment the projection claims: its path plus the hull.
    pub fn segments(&self) -> BTreeSet<EdgeId> {
        self.projection.iter().copied().chain(self.hull.segments.iter().copied()).collect()
    }

    /// Status only moves forward, requested to locked.
    pub fn lock(&mut self) {
        self.status = ProjectionStatus::Locked;
    }
}

/// Agent-side view of its path claims.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatingSpace {
    pub requested: Vec<EdgeId>,
    pub locked: Vec<EdgeId>,
}

impl OperatingSpace {
    pub fn request(&mut self, segments: &[EdgeId]) {
        for s in segments {
            if !self.locked.contains(s) && !self.requested.contains(s) {
                self.requested.push(*s);
            }
        }
    }

    /// Move requested segments to the locked path.
    pub fn lock(&mut self, segments: &BTreeSet<EdgeId>) {
        let (now_locked, still): (Vec<EdgeId>, Vec<EdgeId>) =
            self.requested.iter().partition(|s| segments.contains(s));
        self.requested = still;
        for s in now_locked {
            if !self.locked.contains(&s) {
                self.locked.push(s);
            }
        }
    }

    pub fn release(&mut self, segments: &BTreeSet<EdgeId>) {
        self.locked.retain(|s| !segments.contains(s));
        self.requested.retain(|s| !segments.contains(s));
    }

    pub fn is_locked(&self, segment: EdgeId) -> bool {
        self.locked.contains(&segment)
    }

    pub fn is_empty(&self) -> bool {
        self.requested.is_empty() && self.locked.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> SegmentGraph {
        let mut g = SegmentGraph::new(false);
        for v in ["a", "b", "c"] {
            g.add_node(v).unwrap();
        }
        g.add_edge(1, "a", "b", 100.0).unwrap();
        g.add_edge(2, "b", "c", 100.0).unwrap();
        g
    }

    #[test]
    fn line_paths_within_bound() {
        let g = line();
        let p = g.paths_within(&"a".into(), &"c".into(), 250.0).unwrap();
        assert_eq!(p, vec![GraphPath::from_strs(&["a", "b", "c"])]);
        assert!(g.paths_within(&"a".into(), &"c".into(), 150.0).unwrap().is_empty());
    }

    #[test]
    fn distances() {
        let g = line();
        assert_eq!(g.distance(&"a".into(), &"a".into()).unwrap(), 0.0);
        assert_eq!(g.distance(&"a".into(), &"c".into()).unwrap(), 200.0);
        assert!(matches!(g.distance(&"a".into(), &"q".into()), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn unreachable_is_infinite_and_pathless() {
        let mut g = line();
        g.add_node("d").unwrap();
        assert_eq!(g.distance(&"a".into(), &"d".into()).unwrap(), f64::INFINITY);
        assert!(g.paths_within(&"a".into(), &"d".into(), 1e9).unwrap().is_empty());
        assert_eq!(g.shortest_route(&"a".into(), &"d".into()).unwrap(), None);
    }

    #[test]
    fn shortest_picks_strict_minimum() {
        let mut g = line();
        g.add_edge(3, "a", "c", 150.0).unwrap();
        let paths = vec![GraphPath::from_strs(&["a", "b", "c"]), GraphPath::from_strs(&["a", "c"])];
        assert_eq!(shortest_path(&paths, &g).unwrap(), GraphPath::from_strs(&["a", "c"]));
        assert_eq!(shortest_path(&paths[..1], &g).unwrap(), paths[0]);
        assert_eq!(shortest_path(&[], &g), Err(GraphError::NoCandidatePaths));
    }

    #[test]
    fn directed_edges_are_one_way() {
        let mut g = SegmentGraph::new(true);
        g.add_node("a").unwrap();
        g.add_node("b").unwrap();
        g.add_edge(1, "a", "b", 10.0).unwrap();
        assert_eq!(g.distance(&"a".into(), &"b".into()).unwrap(), 10.0);
        assert_eq!(g.distance(&"b".into(), &"a".into()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn construction_errors() {
        let mut g = line();
        assert_eq!(g.add_edge(1, "a", "c", 1.0), Err(GraphError::DuplicateEdge(EdgeId(1))));
        assert!(matches!(g.add_edge(9, "a", "zz", 1.0), Err(GraphError::UnknownNode(_))));
        assert!(matches!(g.add_edge(9, "a", "c", 0.0), Err(GraphError::BadLength(..))));
        assert!(matches!(g.add_edge(9, "a", "a", 1.0), Err(GraphError::SelfLoop(_))));
        assert!(matches!(g.add_edge(9, "b", "a", 1.0), Err(GraphError::ParallelEdge(..))));
    }

    #[test]
    fn file_format_parses() {
        let text = "graph undirected\n# warehouse\nnode a\nnode b\nedge 4 a b 12.5\n";
        let g = SegmentGraph::parse(text).unwrap();
        assert_eq!(g.edge(EdgeId(4)).unwrap().length, 12.5);
        assert_eq!(SegmentGraph::parse(&g.to_file_string()).unwrap(), g);
        assert!(matches!(SegmentGraph::parse("node a\n"), Err(GraphError::Parse { line: 1, .. })));
        assert!(matches!(
            SegmentGraph::parse("graph undirected\nedge x a b 1\n"),
            Err(GraphError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn operating_space_keeps_requested_and_locked_disjoint() {
        let mut os = OperatingSpace::default();
        os.request(&[EdgeId(1), EdgeId(2)]);
        os.lock(&[EdgeId(1)].into());
        assert_eq!(os.locked, vec![EdgeId(1)]);
        assert_eq!(os.requested, vec![EdgeId(2)]);
        os.request(&[EdgeId(1)]);
        assert_eq!(os.requested, vec![EdgeId(2)]);
        os.release(&[EdgeId(1), EdgeId(2)].into());
        assert!(os.is_empty());
    }
}
