//! Named-value sets: the virtual environment's state repository items and an
//! agent's current knowledge share this representation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ants::Booking;
use crate::fields::TaskField;
use crate::graph::{EdgeId, GraphPath, OperatingSpace, PathProjection, Vertex};
use crate::perception::TrafficState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "camelCase")]
pub enum Value {
    Bool(bool),
    Int(i64),
    Num(f64),
    Text(String),
    Node(Vertex),
    Nodes(Vec<Vertex>),
    Edge(EdgeId),
    Path(GraphPath),
    Paths(Vec<GraphPath>),
    Field(TaskField),
    Projection(PathProjection),
    OperatingSpace(OperatingSpace),
    Traffic(TrafficState),
    Booking(Booking),
    List(Vec<Value>),
}

impl Value {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Numeric view of `Int` and `Num` values.
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_node(&self) -> Option<&Vertex> {
        match self {
            Value::Node(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_path(&self) -> Option<&GraphPath> {
        match self {
            Value::Path(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_paths(&self) -> Option<&[GraphPath]> {
        match self {
            Value::Paths(p) => Some(p),
            _ => None,
        }
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Num(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<Vertex> for Value {
    fn from(v: Vertex) -> Self {
        Value::Node(v)
    }
}

impl From<GraphPath> for Value {
    fn from(p: GraphPath) -> Self {
        Value::Path(p)
    }
}

/// A set of uniquely named values. Writes upsert by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Items(BTreeMap<String, Value>);

pub type StateItems = Items;
pub type Knowledge = Items;

impl Items {
    pub fn new() -> Self {
        Items(BTreeMap::new())
    }

    pub fn single(name: impl Into<String>, value: impl Into<Value>) -> Self {
        let mut items = Items::new();
        items.insert(name, value);
        items
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    /// Upsert one item. Empty names are ignored.
    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        let name = name.into();
        if !name.is_empty() {
            self.0.insert(name, value.into());
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.0.remove(name)
    }

    /// Upsert every item of `items` (last writer wins).
    pub fn write(&mut self, items: Items) {
        self.0.extend(items.0);
    }

    /// Items whose name appears in the template; template values, when
    /// present, must also compare equal.
    pub fn read(&self, template: &Template) -> Items {
        let mut out = Items::new();
        for (name, want) in &template.names {
            if let Some(v) = self.0.get(name) {
                if want.as_ref().is_none_or(|w| w == v) {
                    out.0.insert(name.clone(), v.clone());
                }
            }
        }
        for prefix in &template.prefixes {
            for (k, v) in self.with_prefix(prefix) {
                out.0.insert(k.clone(), v.clone());
            }
        }
        out
    }

    /// Items whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Value)> + 'a {
        self.0.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True if every item of `self` is present with an equal value in `other`.
    pub fn is_subset_of(&self, other: &Items) -> bool {
        self.0.iter().all(|(k, v)| other.0.get(k) == Some(v))
    }
}

impl<K: Into<String>, V: Into<Value>> FromIterator<(K, V)> for Items {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut items = Items::new();
        for (k, v) in iter {
            items.insert(k, v);
        }
        items
    }
}

/// Read template: names to match, each with an optional equality
/// constraint, plus name prefixes that match every item they start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Template {
    names: BTreeMap<String, Option<Value>>,
    prefixes: Vec<String>,
}

impl Template {
    pub fn names<S: AsRef<str>>(names: &[S]) -> Self {
        Template {
            names: names.iter().map(|n| (n.as_ref().to_string(), None)).collect(),
            prefixes: Vec::new(),
        }
    }

    pub fn prefix(prefix: impl Into<String>) -> Self {
        Template { names: BTreeMap::new(), prefixes: vec![prefix.into()] }
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.names.insert(name.into(), Some(value.into()));
        self
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.names.insert(name.into(), None);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty() && self.prefixes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_by_name() {
        let repo: Items = [("position", Value::from(Vertex::from("n4"))), ("map", Value::from("G"))]
            .into_iter()
            .collect();
        let got = repo.read(&Template::names(&["position"]));
        assert_eq!(got, Items::single("position", Vertex::from("n4")));
        assert!(Items::new().read(&Template::names(&["position"])).is_empty());
    }

    #[test]
    fn template_values_constrain() {
        let repo: Items = [("x", 1i64), ("y", 2i64)].into_iter().collect();
        assert_eq!(repo.read(&Template::default().with("x", 1i64).name("y")).len(), 2);
        assert_eq!(repo.read(&Template::default().with("x", 5i64)).len(), 0);
    }

    #[test]
    fn last_writer_wins_and_idempotent() {
        let mut repo = Items::new();
        repo.write(Items::single("x", 1i64));
        repo.write(Items::single("x", 2i64));
        assert_eq!(repo.get("x"), Some(&Value::Int(2)));
        let snapshot = repo.clone();
        repo.write(Items::single("x", 2i64));
        assert_eq!(repo, snapshot);
    }

    #[test]
    fn prefix_scan() {
        let repo: Items = [("field:t1", 1i64), ("field:t2", 2i64), ("fielder", 3i64), ("g", 4i64)]
            .into_iter()
            .collect();
        let names: Vec<&String> = repo.with_prefix("field:").map(|(k, _)| k).collect();
        assert_eq!(names, ["field:t1", "field:t2"]);
    }
}
