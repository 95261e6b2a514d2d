//! Selective perception: representations produced by sensing, descriptions
//! that interpret them into knowledge, and filters that narrow a percept.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{shortest_path, GraphPath, SegmentGraph};
use crate::value::{Items, Knowledge, Value};

/// Sensed data in raw form, as named items.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Representation(pub Items);

impl Representation {
    pub fn items(&self) -> &Items {
        &self.0
    }
}

type Matcher = Arc<dyn Fn(&Representation) -> bool + Send + Sync>;
type Extraction = Arc<dyn Fn(&Representation) -> Knowledge + Send + Sync>;

/// Pattern over a representation plus the knowledge it yields on a match.
#[derive(Clone)]
pub struct Description {
    pub name: String,
    pub matcher: Matcher,
    pub extraction: Extraction,
}

impl fmt::Debug for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Description").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Description {
    pub fn new(
        name: impl Into<String>,
        matcher: impl Fn(&Representation) -> bool + Send + Sync + 'static,
        extraction: impl Fn(&Representation) -> Knowledge + Send + Sync + 'static,
    ) -> Self {
        Description { name: name.into(), matcher: Arc::new(matcher), extraction: Arc::new(extraction) }
    }

    /// Copies the named items verbatim when all of them are present.
    pub fn passthrough(name: impl Into<String>, item_names: &[&str]) -> Self {
        let wanted: Vec<String> = item_names.iter().map(|s| s.to_string()).collect();
        let wanted2 = wanted.clone();
        Description::new(
            name,
            move |rep| wanted.iter().all(|n| rep.0.contains(n)),
            move |rep| wanted2.iter().filter_map(|n| rep.0.get(n).map(|v| (n.clone(), v.clone()))).collect(),
        )
    }
}

/// Union of the extractions of every matching description.
pub fn interpret(rep: &Representation, descriptions: &[Description]) -> Knowledge {
    let mut out = Knowledge::new();
    for d in descriptions {
        if (d.matcher)(rep) {
            out.write((d.extraction)(rep));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub name: String,
    pub params: Items,
}

impl Filter {
    pub fn new(name: impl Into<String>) -> Self {
        Filter { name: name.into(), params: Items::new() }
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.params.insert(name, value);
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("unknown filter {0}")]
    UnknownFilter(String),
    #[error("filter {0}: {1}")]
    BadInput(String, String),
}

pub struct FilterContext<'a> {
    pub graph: &'a SegmentGraph,
}

type FilterFn = Arc<dyn Fn(&Knowledge, &Filter, &FilterContext) -> Result<Knowledge, PerceptionError> + Send + Sync>;

/// Named filter predicates. Built-ins: `identity`, `shortestPath`, `parkLocation`.
#[derive(Clone)]
pub struct FilterRegistry {
    filters: BTreeMap<String, FilterFn>,
}

impl fmt::Debug for FilterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.filters.keys()).finish()
    }
}

impl Default for FilterRegistry {
    fn default() -> Self {
        let mut r = FilterRegistry { filters: BTreeMap::new() };
        r.register("identity", |p, _, _| Ok(p.clone()));
        r.register("shortestPath", shortest_path_filter);
        r.register("parkLocation", park_location_filter);
        r
    }
}

impl FilterRegistry {
    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&Knowledge, &Filter, &FilterContext) -> Result<Knowledge, PerceptionError> + Send + Sync + 'static,
    ) {
        self.filters.insert(name.to_string(), Arc::new(f));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.filters.contains_key(name)
    }

    pub fn apply(&self, percept: &Knowledge, filter: &Filter, ctx: &FilterContext) -> Result<Knowledge, PerceptionError> {
        let f = self
            .filters
            .get(&filter.name)
            .ok_or_else(|| PerceptionError::UnknownFilter(filter.name.clone()))?;
        f(percept, filter, ctx)
    }
}

/// Keeps only the shortest of the candidate `paths`.
fn shortest_path_filter(p: &Knowledge, f: &Filter, ctx: &FilterContext) -> Result<Knowledge, PerceptionError> {
    let mut out = p.clone();
    if let Some(paths) = p.get("paths").and_then(Value::as_paths) {
        let kept: Vec<GraphPath> = shortest_path(paths, ctx.graph).into_iter().collect();
        out.insert("paths", Value::Paths(kept));
    } else if p.contains("paths") {
        return Err(PerceptionError::BadInput(f.name.clone(), "`paths` is not a path list".into()));
    }
    Ok(out)
}

/// Keeps only the park location nearest to the `position` parameter.
fn park_location_filter(p: &Knowledge, f: &Filter, ctx: &FilterContext) -> Result<Knowledge, PerceptionError> {
    let Some(Value::Nodes(candidates)) = p.get("parkLocations") else {
        return Ok(p.clone());
    };
    let pos = f
        .params
        .get("position")
        .and_then(Value::as_node)
        .ok_or_else(|| PerceptionError::BadInput(f.name.clone(), "missing `position` parameter".into()))?;
    let dist = ctx.graph.distances_from(pos).map_err(|e| PerceptionError::BadInput(f.name.clone(), e.to_string()))?;
    let nearest = candidates
        .iter()
        .filter_map(|c| dist.get(c).map(|d| (*d, c)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, c)| c.clone());
    let mut out = p.clone();
    out.insert("parkLocations", Value::Nodes(nearest.into_iter().collect()));
    Ok(out)
}

/// True when every item of `out` comes from `input`, with list-valued
/// items allowed to shrink to a sub-sequence.
pub fn is_sub_percept(out: &Knowledge, input: &Knowledge) -> bool {
    fn sub<T: PartialEq>(a: &[T], b: &[T]) -> bool {
        let mut it = b.iter();
        a.iter().all(|x| it.any(|y| y == x))
    }
    out.iter().all(|(k, v)| match (v, input.get(k)) {
        (Value::Paths(a), Some(Value::Paths(b))) => sub(a, b),
        (Value::Nodes(a), Some(Value::Nodes(b))) => sub(a, b),
        (Value::List(a), Some(Value::List(b))) => sub(a, b),
        (a, Some(b)) => a == b,
        (_, None) => false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TrafficStatus {
    FreeFlow,
    Moderate,
    Heavy,
    Jammed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub path: GraphPath,
    pub status: TrafficStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficObservation {
    /// Vehicles per length unit.
    pub density: f64,
    /// Vehicles per time unit.
    pub intensity: f64,
    pub average_speed: f64,
}

impl TrafficObservation {
    pub fn to_representation(&self, path: &GraphPath) -> Representation {
        Representation(
            [
                ("density", Value::Num(self.density)),
                ("intensity", Value::Num(self.intensity)),
                ("averageSpeed", Value::Num(self.average_speed)),
                ("path", Value::Path(path.clone())),
            ]
            .into_iter()
            .collect(),
        )
    }
}

/// Lower bounds of each congested level; anything below `moderate` flows freely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusThresholds {
    pub moderate: f64,
    pub heavy: f64,
    pub jammed: f64,
}

impl StatusThresholds {
    pub fn classify(&self, load: f64) -> TrafficStatus {
        if load >= self.jammed {
            TrafficStatus::Jammed
        } else if load >= self.heavy {
            TrafficStatus::Heavy
        } else if load >= self.moderate {
            TrafficStatus::Moderate
        } else {
            TrafficStatus::FreeFlow
        }
    }
}

/// Description turning a traffic observation into a `trafficState` item,
/// classified by density.
pub fn congestion_level(thresholds: StatusThresholds) -> Description {
    Description::new(
        "congestionLevel",
        |rep| {
            ["density", "intensity", "averageSpeed", "path"].iter().all(|n| rep.0.contains(n))
                && ["density", "intensity", "averageSpeed"]
                    .iter()
                    .all(|n| rep.0.get(n).and_then(Value::as_num).is_some_and(|x| x >= 0.0))
        },
        move |rep| {
            let density = rep.0.get("density").and_then(Value::as_num).unwrap_or(0.0);
            let path = rep.0.get("path").and_then(Value::as_path).cloned().unwrap_or_default();
            Knowledge::single("trafficState", Value::Traffic(TrafficState { path, status: thresholds.classify(density) }))
        },
    )
}
