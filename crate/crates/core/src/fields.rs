//! Field-based task assignment: task fields decay linearly with path distance
//! from their source, idle vehicles climb the gradient of the summed field.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{SegmentGraph, Vertex};

/// Priorities form a five-level ontology, 1 (lowest) to 5.
pub const MIN_PRIORITY: u8 = 1;
pub const MAX_PRIORITY: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldData {
    pub id: u64,
    pub priority: u8,
    pub source: Vertex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskField {
    pub task_id: String,
    pub field_data: FieldData,
}

impl TaskField {
    pub fn new(task_id: impl Into<String>, id: u64, priority: u8, source: impl Into<Vertex>) -> Self {
        TaskField {
            task_id: task_id.into(),
            field_data: FieldData { id, priority: priority.clamp(MIN_PRIORITY, MAX_PRIORITY), source: source.into() },
        }
    }

    pub fn priority(&self) -> u8 {
        self.field_data.priority
    }

    pub fn source(&self) -> &Vertex {
        &self.field_data.source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub range_unit_meters: f64,
    pub age_ticks: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { range_unit_meters: 50.0, age_ticks: 100 }
    }
}

impl FieldConfig {
    /// Range of a field of priority `p`.
    pub fn range(&self, priority: u8) -> f64 {
        f64::from(priority) * self.range_unit_meters
    }

    fn value_at_distance(&self, priority: u8, d: f64) -> f64 {
        (self.range(priority) - d).max(0.0)
    }
}

/// `max(0, range(priority) - d)` with `d` the path distance from the source.
pub fn field_value(field: &TaskField, at: &Vertex, graph: &SegmentGraph, cfg: &FieldConfig) -> f64 {
    let d = graph.distance(field.source(), at).unwrap_or(f64::INFINITY);
    cfg.value_at_distance(field.priority(), d)
}

pub fn combine<'a>(
    fields: impl IntoIterator<Item = &'a TaskField>,
    at: &Vertex,
    graph: &SegmentGraph,
    cfg: &FieldConfig,
) -> f64 {
    fields.into_iter().map(|f| field_value(f, at, graph, cfg)).sum()
}

/// Combined value of `fields` at every node of the graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CombinedField {
    pub values: BTreeMap<Vertex, f64>,
}

impl CombinedField {
    pub fn compute<'a>(
        fields: impl IntoIterator<Item = &'a TaskField>,
        graph: &SegmentGraph,
        cfg: &FieldConfig,
    ) -> Self {
        let mut values: BTreeMap<Vertex, f64> = graph.nodes().map(|v| (v.clone(), 0.0)).collect();
        for f in fields {
            let Ok(dist) = graph.distances_from(f.source()) else { continue };
            for (v, d) in dist {
                *values.entry(v).or_default() += cfg.value_at_distance(f.priority(), d);
            }
        }
        CombinedField { values }
    }

    pub fn at(&self, v: &Vertex) -> f64 {
        self.values.get(v).copied().unwrap_or(0.0)
    }
}

/// Next node for a vehicle following the combined-field gradient: the
/// neighbor with the largest strictly improving value (smallest id on ties),
/// or `position` itself when no neighbor improves.
pub fn gradient_step(position: &Vertex, fields: &[TaskField], graph: &SegmentGraph, cfg: &FieldConfig) -> Vertex {
    if fields.is_empty() {
        return position.clone();
    }
    let combined = CombinedField::compute(fields, graph, cfg);
    let here = combined.at(position);
    let mut best: Option<(&Vertex, f64)> = None;
    // neighbors() is sorted by id, so the first maximum wins ties.
    for (_, n) in graph.neighbors(position) {
        let v = combined.at(n);
        if v > here && best.is_none_or(|(_, b)| v > b) {
            best = Some((n, v));
        }
    }
    best.map(|(n, _)| n.clone()).unwrap_or_else(|| position.clone())
}

/// Field priority after `unassigned_ticks` without assignment: one level per
/// full aging window, capped at the top level. `field` carries the priority
/// at emission.
pub fn age_priority(field: &TaskField, unassigned_ticks: u64, cfg: &FieldConfig) -> TaskField {
    let windows = unassigned_ticks.checked_div(cfg.age_ticks).unwrap_or(0);
    let raised = u64::from(field.priority()).saturating_add(windows).min(u64::from(MAX_PRIORITY));
    let mut aged = field.clone();
    aged.field_data.priority = raised as u8;
    aged
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, len: f64) -> SegmentGraph {
        let mut g = SegmentGraph::new(false);
        for i in 0..n {
            g.add_node(format!("v{i}").as_str()).unwrap();
        }
        for i in 1..n {
            g.add_edge(i as u32, format!("v{}", i - 1).as_str(), format!("v{i}").as_str(), len).unwrap();
        }
        g
    }

    #[test]
    fn value_at_source_and_boundary() {
        let g = line(5, 50.0);
        let cfg = FieldConfig::default();
        let f = TaskField::new("t", 1, 3, "v0");
        assert_eq!(field_value(&f, &"v0".into(), &g, &cfg), 150.0);
        assert_eq!(field_value(&f, &"v2".into(), &g, &cfg), 50.0);
        assert_eq!(field_value(&f, &"v3".into(), &g, &cfg), 0.0);
        assert_eq!(field_value(&f, &"v4".into(), &g, &cfg), 0.0);
    }

    #[test]
    fn combine_sums() {
        let g = line(3, 10.0);
        let cfg = FieldConfig::default();
        assert_eq!(combine([], &"v0".into(), &g, &cfg), 0.0);
        let f1 = TaskField::new("a", 1, 1, "v0");
        let f2 = TaskField::new("b", 2, 2, "v2");
        let at = Vertex::from("v1");
        assert_eq!(combine([&f1], &at, &g, &cfg), field_value(&f1, &at, &g, &cfg));
        assert_eq!(combine([&f1, &f2], &at, &g, &cfg), 40.0 + 90.0);
    }

    #[test]
    fn gradient_without_fields_stays() {
        let g = line(3, 10.0);
        assert_eq!(gradient_step(&"v1".into(), &[], &g, &FieldConfig::default()), Vertex::from("v1"));
    }

    #[test]
    fn gradient_tie_picks_smaller_id() {
        let mut g = SegmentGraph::new(false);
        for v in ["c", "s", "x", "y"] {
            g.add_node(v).unwrap();
        }
        g.add_edge(1, "c", "y", 10.0).unwrap();
        g.add_edge(2, "c", "x", 10.0).unwrap();
        g.add_edge(3, "y", "s", 10.0).unwrap();
        g.add_edge(4, "x", "s", 10.0).unwrap();
        let cfg = FieldConfig::default();
        let fields = [TaskField::new("a", 1, 5, "s")];
        assert_eq!(gradient_step(&"c".into(), &fields, &g, &cfg), Vertex::from("x"));
    }

    #[test]
    fn aging_windows_and_cap() {
        let cfg = FieldConfig::default();
        let f = TaskField::new("t", 1, 2, "v0");
        assert_eq!(age_priority(&f, 99, &cfg).priority(), 2);
        assert_eq!(age_priority(&f, 200, &cfg).priority(), 4);
        let top = TaskField::new("t", 1, 5, "v0");
        assert_eq!(age_priority(&top, 1000, &cfg).priority(), 5);
    }
}
