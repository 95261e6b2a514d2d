use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use serde::Serialize;

use situated::ants::plan_booking;
use situated::fields::{field_value, gradient_step, FieldConfig, TaskField};
use situated::freeflow::{propagate, select_action, FreeFlowTree, SituatedCommitment, TreeBuilder};
use situated::graph::{GraphPath, SegmentGraph, Vertex};
use situated::kernel::{Event, Kernel, NetworkConfig, NodeId, Tick, TracePayload};
use situated::value::Knowledge;

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Note(u32);

impl TracePayload for Note {
    fn kind(&self) -> &str {
        "note"
    }
}

/// Connected undirected graph: a random spanning tree plus extra edges.
fn graph_strategy(max_nodes: usize) -> impl Strategy<Value = SegmentGraph> {
    (2..=max_nodes)
        .prop_flat_map(|n| {
            let tree = (1..n).map(|i| (0..i, 1u32..=20)).collect::<Vec<_>>();
            let extra = prop::collection::vec((0..n, 0..n, 1u32..=20), 0..n);
            (Just(n), tree, extra)
        })
        .prop_map(|(n, tree, extra)| {
            let mut g = SegmentGraph::new(false);
            for i in 0..n {
                g.add_node(format!("v{i}").as_str()).unwrap();
            }
            let mut seen = BTreeSet::new();
            let pairs = tree.into_iter().enumerate().map(|(i, (p, l))| (p, i + 1, l)).chain(extra);
            for (a, b, len) in pairs {
                if a == b || !seen.insert((a.min(b), a.max(b))) {
                    continue;
                }
                let id = seen.len() as u32;
                g.add_edge(id, format!("v{a}").as_str(), format!("v{b}").as_str(), f64::from(len)).unwrap();
            }
            g
        })
}

fn chain(stims: &[f64; 3], weights: &[f64; 2], root_weight: f64, role: &str, base: u32) -> FreeFlowTree {
    let mut b = TreeBuilder::new(role, root_weight)
        .internal(base, role)
        .action(base + 1, &format!("{role}-a"))
        .action(base + 2, &format!("{role}-b"))
        .edge(base, base + 1, weights[0])
        .edge(base, base + 2, weights[1]);
    for (i, s) in stims.iter().enumerate() {
        let s = *s;
        b = b.stimulus(&format!("s{i}"), base + i as u32, move |_: &Knowledge| s);
    }
    b.build().unwrap()
}

/// Halves are exact in binary, so scaled sums stay exact.
fn halves() -> impl Strategy<Value = f64> {
    (0u32..8).prop_map(|h| f64::from(h) / 2.0)
}

proptest! {
    #[test]
    fn kernel_dispatch_is_ordered_and_fifo(
        sends in prop::collection::vec((0usize..3, 0usize..3, 0u64..5), 1..40),
        latency in 0u64..4,
    ) {
        let mut k: Kernel<Note> = Kernel::new(NetworkConfig { latency_ticks: latency, drop_probability: 0.0, seed: 1 }).unwrap();
        let nodes: Vec<NodeId> = (0..3).map(|i| NodeId::new(format!("n{i}"))).collect();
        for n in &nodes {
            k.join_node(n.clone(), BTreeSet::new()).unwrap();
        }
        for (i, (from, _, delay)) in sends.iter().enumerate() {
            k.schedule(nodes[*from].clone(), Note(i as u32), *delay).unwrap();
        }
        let mut last = (Tick(0), 0);
        let mut received: BTreeMap<(NodeId, NodeId), Vec<u32>> = BTreeMap::new();
        let mut sent: BTreeMap<(NodeId, NodeId), Vec<u32>> = BTreeMap::new();
        while k.pending() > 0 {
            for r in k.step() {
                prop_assert!((r.tick, r.seq) > last || last == (Tick(0), 0));
                last = (r.tick, r.seq);
                match r.event {
                    Event::Local(Note(i)) => {
                        let to = &nodes[sends[i as usize].1];
                        k.transmit(&r.node, to, Note(i)).unwrap();
                        sent.entry((r.node.clone(), to.clone())).or_default().push(i);
                    }
                    Event::Deliver { from, body } => received.entry((from, r.node.clone())).or_default().push(body.0),
                    _ => {}
                }
            }
        }
        prop_assert_eq!(received, sent);
    }

    #[test]
    fn dead_node_gets_no_events(leave_at in 1u64..10, n in 1usize..20) {
        let mut k: Kernel<Note> = Kernel::new(NetworkConfig::default()).unwrap();
        let (a, b) = (NodeId::new("a"), NodeId::new("b"));
        k.join_node(a.clone(), BTreeSet::new()).unwrap();
        k.join_node(b.clone(), BTreeSet::new()).unwrap();
        for i in 0..n {
            k.schedule(a.clone(), Note(i as u32), i as u64 % 12).unwrap();
            k.schedule(b.clone(), Note(i as u32), i as u64 % 12).unwrap();
        }
        let mut left = None;
        while k.pending() > 0 || left.is_none() {
            if left.is_none() && k.peek_tick().map_or(true, |t| t.0 >= leave_at) {
                k.advance_to(Tick(leave_at));
                k.leave_node(&b).unwrap();
                left = Some(k.now());
            }
            for r in k.step() {
                if let Some(t) = left {
                    prop_assert!(r.node != b || (r.tick == t && r.event == Event::Left));
                }
                if let Event::Local(Note(i)) = r.event {
                    let _ = k.transmit(&r.node, &b, Note(i));
                }
            }
        }
    }

    #[test]
    fn paths_within_is_downward_closed(g in graph_strategy(8), tight in 0.0f64..1.0, dest in 1usize..8) {
        let to = Vertex::new(format!("v{}", dest % g.node_count()));
        prop_assume!(to.as_str() != "v0");
        let from = Vertex::from("v0");
        let max = 60.0;
        let wide: BTreeSet<GraphPath> = g.paths_within(&from, &to, max).unwrap().into_iter().collect();
        let narrow: BTreeSet<GraphPath> = g.paths_within(&from, &to, max * tight).unwrap().into_iter().collect();
        prop_assert!(narrow.is_subset(&wide));
        for p in &wide {
            prop_assert!(g.is_valid_path(p));
            let edges = g.path_edges(p).unwrap();
            prop_assert_eq!(edges.iter().collect::<BTreeSet<_>>().len(), edges.len());
        }
        let d = g.distance(&from, &to).unwrap();
        if d <= max {
            let best = wide.iter().map(|p| g.path_length(p).unwrap()).fold(f64::INFINITY, f64::min);
            prop_assert!((best - d).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_file_round_trip(g in graph_strategy(10)) {
        prop_assert_eq!(SegmentGraph::parse(&g.to_file_string()).unwrap(), g);
    }

    #[test]
    fn field_decays_to_zero_and_gradient_climbs(g in graph_strategy(10), prio in 1u8..=5, src in 0usize..10, at in 0usize..10) {
        let n = g.node_count();
        let cfg = FieldConfig { range_unit_meters: 15.0, age_ticks: 100 };
        let field = TaskField::new("t", 1, prio, format!("v{}", src % n).as_str());
        let at = Vertex::new(format!("v{}", at % n));
        let here = field_value(&field, &at, &g, &cfg);
        let d = g.distance(field.source(), &at).unwrap();
        prop_assert_eq!(here == 0.0, d >= cfg.range(prio));
        for (_, v) in g.neighbors(&at) {
            let dv = g.distance(field.source(), v).unwrap();
            if dv >= d {
                prop_assert!(field_value(&field, v, &g, &cfg) <= here);
            }
        }
        let next = gradient_step(&at, std::slice::from_ref(&field), &g, &cfg);
        prop_assert!(field_value(&field, &next, &g, &cfg) >= here);
    }

    #[test]
    fn booking_windows_tile_the_path(g in graph_strategy(8), start in 0u64..50, speed in 0.5f64..8.0) {
        let from = Vertex::from("v0");
        let to = Vertex::new(format!("v{}", g.node_count() - 1));
        let path = g.shortest_route(&from, &to).unwrap().unwrap();
        let b = plan_booking(3, "car", &path, &g, Tick(start), speed).unwrap();
        prop_assert!(b.validate().is_ok());
        prop_assert!(b.follows_path(&g));
        prop_assert_eq!(b.entries[0].window.0, Tick(start));
        for w in b.entries.windows(2) {
            prop_assert_eq!(w[0].window.1, w[1].window.0);
        }
        for e in &b.entries {
            prop_assert!(e.window.1 > e.window.0);
        }
    }

    #[test]
    fn scaling_keeps_the_selected_action(
        a in prop::array::uniform3(halves()), b in prop::array::uniform3(halves()),
        wa in prop::array::uniform2(halves()), wb in prop::array::uniform2(halves()),
        root in halves(), shift in 1i32..4,
    ) {
        let c = 2f64.powi(shift);
        let scale = |s: &[f64; 3]| s.map(|x| x * c);
        let before = propagate(&[chain(&a, &wa, 1.0, "x", 0), chain(&b, &wb, 2.0, "y", 10)], &[], root, &Knowledge::new()).unwrap();
        let after = propagate(&[chain(&scale(&a), &wa, 1.0, "x", 0), chain(&scale(&b), &wb, 2.0, "y", 10)], &[], root * c, &Knowledge::new()).unwrap();
        let none = BTreeSet::new();
        prop_assert_eq!(select_action(&before, &none).map(|s| s.node), select_action(&after, &none).map(|s| s.node));
    }

    #[test]
    fn commitment_never_lowers_its_target(
        a in prop::array::uniform3(halves()), b in prop::array::uniform3(halves()),
        wa in prop::array::uniform2(halves()), wb in prop::array::uniform2(halves()),
        root in halves(),
    ) {
        let roles = [chain(&a, &wa, 1.0, "x", 0), chain(&b, &wb, 2.0, "y", 10)];
        let off = propagate(&roles, &[], root, &Knowledge::new()).unwrap();
        let c = SituatedCommitment::new("c", &["x"], "y", |_: &Knowledge| true);
        let on = propagate(&roles, &[c], root, &Knowledge::new()).unwrap();
        for id in 10..13 {
            prop_assert!(on.of(id) >= off.of(id));
        }
        for id in 0..3 {
            prop_assert_eq!(on.of(id), off.of(id));
        }
        prop_assert_eq!(propagate(&roles, &[], root, &Knowledge::new()).unwrap(), off);
    }
}
