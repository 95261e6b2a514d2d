//! Foci and actions shared by both scenarios.

use std::collections::BTreeSet;

use crate::env::{Action, ActionType, Operation, PerceptionType, Sense, VirtualEnvironment};
use crate::fields::TaskField;
use crate::graph::{EdgeId, GraphPath, Hull, Vertex};
use crate::perception::Representation;
use crate::value::{Items, StateItems, Template, Value};

pub fn register_standard(ve: &mut VirtualEnvironment) {
    let virt = |template, generate| PerceptionType::Virtual { template, generate };
    ve.register_focus("paths", virt(no_template, paths_focus));
    ve.register_focus("route", virt(no_template, route_focus));
    ve.register_focus("fields", virt(fields_template, fields_focus));
    ve.register_focus("projections", virt(projections_template, projections_focus));
    ve.register_focus("operatingSpace", virt(no_template, operating_space_focus));
    ve.register_focus("resource", virt(no_template, resource_focus));
    ve.register_focus("resourceOf", virt(no_template, resource_of_focus));
    ve.register_focus("agentsInScope", virt(no_template, scope_focus));

    ve.register_action("project", ActionType::Virtual(project_action));
    ve.register_action("clear", ActionType::Virtual(clear_action));
    ve.register_action("withdraw", ActionType::Virtual(withdraw_action));
    ve.register_action("emit", ActionType::Virtual(emit_action));
    ve.register_action("removeField", ActionType::Virtual(remove_field_action));
    ve.register_action("publish", ActionType::Virtual(publish_action));

    ve.register_action("pick", ActionType::External(pick_action));
    ve.register_action("drop", ActionType::External(drop_action));
    ve.register_action("move", ActionType::External(move_action));
    ve.register_action("charge", ActionType::External(charge_action));
    ve.register_action("instructDriver", ActionType::External(instruct_driver_action));
}

fn no_template(_: &Sense) -> Template {
    Template::default()
}

fn fields_template(_: &Sense) -> Template {
    Template::prefix("field:")
}

fn projections_template(s: &Sense) -> Template {
    Template::prefix(format!("projection:{}:", s.agent_id))
}

fn node_param(items: &Items, name: &str) -> Result<Vertex, String> {
    items
        .get(name)
        .and_then(Value::as_node)
        .cloned()
        .ok_or_else(|| format!("missing node parameter `{name}`"))
}

fn num_param(items: &Items, name: &str) -> Result<f64, String> {
    items
        .get(name)
        .and_then(Value::as_num)
        .ok_or_else(|| format!("missing numeric parameter `{name}`"))
}

fn int_param(items: &Items, name: &str) -> Result<i64, String> {
    items
        .get(name)
        .and_then(Value::as_int)
        .ok_or_else(|| format!("missing integer parameter `{name}`"))
}

fn text_param<'a>(items: &'a Items, name: &str) -> Result<&'a str, String> {
    items
        .get(name)
        .and_then(Value::as_text)
        .ok_or_else(|| format!("missing text parameter `{name}`"))
}

fn rep(name: &str, v: Value) -> Representation {
    Representation(Items::single(name, v))
}

/// Every route within `maxDist` meters.
fn paths_focus(s: &Sense, _: &StateItems, ve: &VirtualEnvironment) -> Result<Representation, String> {
    let p = &s.focus.params;
    let from = node_param(p, "from")?;
    let to = node_param(p, "to")?;
    let max = num_param(p, "maxDist")?;
    let paths = ve.graph().paths_within(&from, &to, max).map_err(|e| e.to_string())?;
    Ok(rep("paths", Value::Paths(paths)))
}

/// Every route of minimal length.
fn route_focus(s: &Sense, _: &StateItems, ve: &VirtualEnvironment) -> Result<Representation, String> {
    let p = &s.focus.params;
    let from = node_param(p, "from")?;
    let to = node_param(p, "to")?;
    let g = ve.graph();
    let d = g.distance(&from, &to).map_err(|e| e.to_string())?;
    if !d.is_finite() {
        return Ok(rep("paths", Value::Paths(Vec::new())));
    }
    let slack = 1e-9 * d.max(1.0);
    let paths = g.paths_within(&from, &to, d + slack).map_err(|e| e.to_string())?;
    Ok(rep("paths", Value::Paths(paths)))
}

fn fields_focus(_: &Sense, items: &StateItems, _: &VirtualEnvironment) -> Result<Representation, String> {
    let fields: Vec<Value> = items.iter().filter(|(_, v)| matches!(v, Value::Field(_))).map(|(_, v)| v.clone()).collect();
    Ok(rep("fields", Value::List(fields)))
}

fn projections_focus(_: &Sense, items: &StateItems, _: &VirtualEnvironment) -> Result<Representation, String> {
    let projections: Vec<Value> = items.iter().map(|(_, v)| v.clone()).collect();
    Ok(rep("projections", Value::List(projections)))
}

fn operating_space_focus(s: &Sense, _: &StateItems, ve: &VirtualEnvironment) -> Result<Representation, String> {
    Ok(rep("operatingSpace", Value::OperatingSpace(ve.operating_space(&s.agent_id))))
}

/// The sensing agent's mirrored resource state, under plain names.
fn resource_focus(s: &Sense, _: &StateItems, ve: &VirtualEnvironment) -> Result<Representation, String> {
    Ok(mirrored(ve, &s.agent_id))
}

fn mirrored(ve: &VirtualEnvironment, agent: &str) -> Representation {
    let suffix = format!(":{agent}");
    let items = ve
        .state()
        .iter()
        .filter_map(|(k, v)| k.strip_suffix(&suffix).map(|n| (n.to_string(), v.clone())))
        .filter(|(n, _)| !n.contains(':'))
        .collect();
    Representation(items)
}

/// Mirrored resource state of the agent named by the `agent` parameter.
fn resource_of_focus(s: &Sense, _: &StateItems, ve: &VirtualEnvironment) -> Result<Representation, String> {
    Ok(mirrored(ve, text_param(&s.focus.params, "agent")?))
}

/// Agents of `kind` within `scope` meters of the sensing agent.
fn scope_focus(s: &Sense, _: &StateItems, ve: &VirtualEnvironment) -> Result<Representation, String> {
    let scope = num_param(&s.focus.params, "scope")?;
    let kind = text_param(&s.focus.params, "kind")?;
    let center = ve
        .position_of(&s.agent_id)
        .cloned()
        .ok_or_else(|| format!("position of {} unknown", s.agent_id))?;
    let dist = ve.graph().distances_from(&center).map_err(|e| e.to_string())?;
    let members: Vec<Value> = ve
        .addresses()
        .iter()
        .filter(|(id, a)| *id != &s.agent_id && a.kind == kind)
        .filter(|(_, a)| a.position.as_ref().and_then(|p| dist.get(p)).is_some_and(|d| *d <= scope))
        .map(|(id, _)| Value::Text(id.clone()))
        .collect();
    Ok(rep("agentsInScope", Value::List(members)))
}

fn edge_list(v: Option<&Value>) -> Result<BTreeSet<EdgeId>, String> {
    match v {
        None => Ok(BTreeSet::new()),
        Some(Value::List(xs)) => xs
            .iter()
            .map(|x| match x {
                Value::Edge(e) => Ok(*e),
                other => Err(format!("{other:?} is not a segment")),
            })
            .collect(),
        Some(other) => Err(format!("{other:?} is not a segment list")),
    }
}

fn projection_id(a: &Action) -> Result<u64, String> {
    u64::try_from(int_param(&a.params, "projectionId")?).map_err(|e| e.to_string())
}

fn project_action(ve: &mut VirtualEnvironment, a: &Action) -> Result<(), String> {
    let priority = int_param(&a.params, "priority").unwrap_or(0).clamp(0, 255) as u8;
    let path = a.params.get("path").and_then(Value::as_path).cloned().unwrap_or_default();
    let hull = Hull { segments: edge_list(a.params.get("hull"))?, margin: 0.0 };
    ve.project(&a.agent_id, priority, hull, &path).map(|_| ())
}

fn clear_action(ve: &mut VirtualEnvironment, a: &Action) -> Result<(), String> {
    let segments = edge_list(a.params.get("segments"))?;
    ve.clear_projection(projection_id(a)?, &segments)
}

fn withdraw_action(ve: &mut VirtualEnvironment, a: &Action) -> Result<(), String> {
    ve.withdraw_projection(projection_id(a)?)
}

fn emit_action(ve: &mut VirtualEnvironment, a: &Action) -> Result<(), String> {
    let task = text_param(&a.params, "taskId")?.to_string();
    let id = u64::try_from(int_param(&a.params, "fieldId")?).map_err(|e| e.to_string())?;
    let priority = int_param(&a.params, "priority")?.clamp(0, 255) as u8;
    let source = node_param(&a.params, "source")?;
    if !ve.graph().contains(&source) {
        return Err(format!("unknown node {source}"));
    }
    ve.emit_field(TaskField::new(task, id, priority, source));
    Ok(())
}

fn remove_field_action(ve: &mut VirtualEnvironment, a: &Action) -> Result<(), String> {
    let task = text_param(&a.params, "taskId")?.to_string();
    ve.remove_field(&task);
    Ok(())
}

/// Publish the acting agent's own resource items to every node.
fn publish_action(ve: &mut VirtualEnvironment, a: &Action) -> Result<(), String> {
    ve.publish_resource(&a.agent_id, a.params.clone());
    Ok(())
}

fn operation(a: &Action, name: &str, params: Items) -> Operation {
    Operation { agent_id: a.agent_id.clone(), name: name.to_string(), params }
}

/// The segment a load at `node` is reached from: its smallest incident edge.
fn load_segment(ve: &VirtualEnvironment, node: &Vertex) -> Result<EdgeId, String> {
    ve.graph()
        .neighbors(node)
        .iter()
        .map(|(e, _)| *e)
        .min()
        .ok_or_else(|| format!("node {node} has no segments"))
}

fn load_op(a: &Action, ve: &VirtualEnvironment, name: &str) -> Result<Operation, String> {
    let node = node_param(&a.params, "node")?;
    let segment = load_segment(ve, &node)?;
    let params = [("segment", Value::Edge(segment)), ("node", Value::Node(node))].into_iter().collect();
    Ok(operation(a, name, params))
}

fn pick_action(a: &Action, ve: &VirtualEnvironment) -> Result<Operation, String> {
    load_op(a, ve, "moveToAndPick")
}

fn drop_action(a: &Action, ve: &VirtualEnvironment) -> Result<Operation, String> {
    load_op(a, ve, "moveToAndDrop")
}

fn move_action(a: &Action, ve: &VirtualEnvironment) -> Result<Operation, String> {
    let to = node_param(&a.params, "to")?;
    let segment = match a.params.get("segment") {
        Some(Value::Edge(e)) => *e,
        _ => return Err("missing segment".into()),
    };
    let edge = ve.graph().edge(segment).ok_or_else(|| format!("unknown segment {segment}"))?;
    if edge.from != to && edge.to != to {
        return Err(format!("segment {segment} does not reach {to}"));
    }
    let params = [("segment", Value::Edge(segment)), ("to", Value::Node(to))].into_iter().collect();
    Ok(operation(a, "moveTo", params))
}

fn charge_action(a: &Action, _: &VirtualEnvironment) -> Result<Operation, String> {
    Ok(operation(a, "charge", Items::new()))
}

fn instruct_driver_action(a: &Action, ve: &VirtualEnvironment) -> Result<Operation, String> {
    let path: GraphPath = a.params.get("path").and_then(Value::as_path).cloned().ok_or("missing path")?;
    if !ve.graph().is_valid_path(&path) {
        return Err(format!("{path} is not a route"));
    }
    Ok(operation(a, "instructDriver", Items::single("path", path)))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::codec::ContentLanguage;
    use crate::env::{Focus, VeOutput};
    use crate::graph::SegmentGraph;
    use crate::kernel::NodeId;

    fn env() -> VirtualEnvironment {
        let mut g = SegmentGraph::new(false);
        for v in ["n1", "n2", "n3", "n45"] {
            g.add_node(v).unwrap();
        }
        g.add_edge(7, "n1", "n2", 10.0).unwrap();
        g.add_edge(8, "n2", "n3", 10.0).unwrap();
        g.add_edge(9, "n1", "n3", 30.0).unwrap();
        g.add_edge(3, "n3", "n45", 10.0).unwrap();
        VirtualEnvironment::with_standard_types(NodeId::from("a"), 1, Arc::new(g), Arc::new(ContentLanguage::new()))
    }

    #[test]
    fn pick_targets_load_segment() {
        let mut ve = env();
        ve.act(&Action::new("agv1", "pick").with("node", Vertex::from("n45"))).unwrap();
        let ops: Vec<_> = ve.drain_outputs();
        match &ops[..] {
            [VeOutput::Operation(op)] => {
                assert_eq!(op.name, "moveToAndPick");
                assert_eq!(op.params.get("segment"), Some(&Value::Edge(EdgeId(3))));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn project_with_priority_zero_is_requested() {
        let mut ve = env();
        let path = GraphPath::from_strs(&["n1", "n2"]);
        let a = Action::new("agv1", "project").with("priority", 0i64).with("path", path);
        ve.act(&a).unwrap();
        // A lone node grants at once.
        let ps = ve.projections_of("agv1");
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].projection, vec![EdgeId(7)]);
        let bad = Action::new("agv1", "project").with("path", GraphPath::from_strs(&["n1", "n45"]));
        assert!(ve.act(&bad).is_err());
    }

    #[test]
    fn route_focus_yields_minimal_paths() {
        let mut ve = env();
        let s = Sense {
            agent_id: "x".into(),
            focus: Focus::new("route").with("from", Vertex::from("n1")).with("to", Vertex::from("n3")),
        };
        let r = ve.sense(&s).unwrap();
        assert_eq!(r.0.get("paths"), Some(&Value::Paths(vec![GraphPath::from_strs(&["n1", "n2", "n3"])])));
    }

    #[test]
    fn empty_fields_focus() {
        let mut ve = env();
        let s = Sense { agent_id: "x".into(), focus: Focus::new("fields") };
        assert_eq!(ve.sense(&s).unwrap().0.get("fields"), Some(&Value::List(vec![])));
        let unknown = Sense { agent_id: "x".into(), focus: Focus::new("nope") };
        assert!(ve.sense(&unknown).is_err());
    }
}
