//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use situated::ants::{self, plan_booking, AntConfig, BookingOutcome};
use situated::codec::{ContentLanguage, Domain, Message, MessageData};
use situated::dyncnet::{model_check, DynConfig, InitiatorPhase, ModelConfig, ParticipantPhase};
use situated::fields::{age_priority, gradient_step, FieldConfig, TaskField};
use situated::freeflow::{propagate, SituatedCommitment, TreeBuilder};
use situated::graph::{GraphPath, SegmentGraph, Vertex};
use situated::kernel::{NetworkConfig, Tick};
use situated::scenario::agv::{self, grid_graph, lock_drill, AgvScenario, AgvSettings, BodyParams};
use situated::scenario::config::{load_config, AssignmentMode, TaskSpec};
use situated::scenario::run_scenario;
use situated::scenario::traffic::{explore_paths, TrafficScenario};
use situated::value::{Knowledge, Value};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn line_graph(n: usize, len: f64) -> SegmentGraph {
    let mut g = SegmentGraph::new(false);
    for i in 0..n {
        g.add_node(format!("n{i}").as_str()).unwrap();
    }
    for i in 1..n {
        g.add_edge(i as u32, format!("n{}", i - 1).as_str(), format!("n{i}").as_str(), len).unwrap();
    }
    g
}

// ---- 1 ---------------------------------------------------------------------

fn commitment_arithmetic() -> Outcome {
    let working = TreeBuilder::new("working", 1.0)
        .internal(1, "working")
        .action(2, "pick")
        .edge(1, 2, 1.0)
        .build()
        .map_err(|e| e.to_string())?;
    let parking = TreeBuilder::new("parking", 2.0)
        .internal(10, "parking")
        .action(11, "park")
        .edge(10, 11, 1.0)
        .build()
        .map_err(|e| e.to_string())?;
    let work = SituatedCommitment::new("work", &["parking"], "working", |_: &Knowledge| true);
    let a = propagate(&[working, parking], &[work], 1.0, &Knowledge::new()).map_err(|e| e.to_string())?;
    check(a.of(10) == 2.0 && a.of(1) == 3.0, || format!("parking {} working {}", a.of(10), a.of(1)))?;
    Ok("parking-top 2, working-top 3".into())
}

// ---- 2 ---------------------------------------------------------------------

struct RandomRole {
    name: String,
    root_weight: f64,
    /// (parent, child, weight)
    edges: Vec<(u32, u32, f64)>,
    nodes: Vec<u32>,
    leaves: BTreeSet<u32>,
    boosts: BTreeMap<u32, f64>,
}

fn random_role(rng: &mut ChaCha8Rng, name: &str, base: u32, size: usize) -> RandomRole {
    let nodes: Vec<u32> = (0..size as u32).map(|i| base + i).collect();
    let mut edges = Vec::new();
    for i in 1..size {
        let parent = nodes[rng.gen_range(0..i)];
        edges.push((parent, nodes[i], rng.gen_range(0.0..2.0)));
    }
    // An occasional second parent keeps the structure a DAG.
    if size > 3 && rng.gen_bool(0.5) {
        let child = rng.gen_range(2..size);
        let parent = nodes[rng.gen_range(0..child)];
        if !edges.iter().any(|(p, c, _)| *p == parent && *c == nodes[child]) {
            edges.push((parent, nodes[child], rng.gen_range(0.0..2.0)));
        }
    }
    let parents: BTreeSet<u32> = edges.iter().map(|(p, _, _)| *p).collect();
    let leaves: BTreeSet<u32> = nodes.iter().copied().filter(|n| !parents.contains(n)).collect();
    let mut boosts = BTreeMap::new();
    for n in &nodes {
        if rng.gen_bool(0.4) {
            boosts.insert(*n, rng.gen_range(0.0..3.0));
        }
    }
    RandomRole { name: name.to_string(), root_weight: rng.gen_range(0.0..3.0), edges, nodes, leaves, boosts }
}

/// Activity of `n` by recursion over its parents.
fn oracle_activity(role: &RandomRole, n: u32, root: f64, transfer: f64) -> f64 {
    let boost = role.boosts.get(&n).copied().unwrap_or(0.0);
    if n == role.nodes[0] {
        return root * role.root_weight + boost + transfer;
    }
    boost
        + role
            .edges
            .iter()
            .filter(|(_, c, _)| *c == n)
            .map(|(p, _, w)| oracle_activity(role, *p, root, transfer) * w)
            .sum::<f64>()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let total = rng.gen_range(2..=20usize);
        let split = if total >= 4 && rng.gen_bool(0.5) { rng.gen_range(2..=total - 2) } else { total };
        let mut roles = vec![random_role(&mut rng, "a", 100, split)];
        if split < total {
            roles.push(random_role(&mut rng, "b", 200, total - split));
        }
        let committed = roles.len() == 2 && rng.gen_bool(0.5);
        let root = rng.gen_range(0.0..2.0);
        let trees = roles
            .iter()
            .map(|r| {
                let mut b = TreeBuilder::new(r.name.as_str(), r.root_weight);
                for n in &r.nodes {
                    b = if r.leaves.contains(n) { b.action(*n, &format!("act{n}")) } else { b.internal(*n, &format!("n{n}")) };
                }
                for (p, c, w) in &r.edges {
                    b = b.edge(*p, *c, *w);
                }
                for (n, v) in &r.boosts {
                    let v = *v;
                    b = b.stimulus(&format!("s{n}"), *n, move |_: &Knowledge| v);
                }
                b.build()
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("case {case}: {e}"))?;
        let commitments = if committed {
            vec![SituatedCommitment::new("c", &["a"], "b", |_: &Knowledge| true)]
        } else {
            Vec::new()
        };
        let got = propagate(&trees, &commitments, root, &Knowledge::new()).map_err(|e| e.to_string())?;
        let a_top = oracle_activity(&roles[0], roles[0].nodes[0], root, 0.0);
        for (i, r) in roles.iter().enumerate() {
            let transfer = if committed && i == 1 { a_top } else { 0.0 };
            for n in &r.nodes {
                let want = oracle_activity(r, *n, root, transfer);
                let diff = (got.of(*n) - want).abs();
                worst = worst.max(diff);
                check(diff <= 1e-9, || format!("case {case} node {n}: {} vs oracle {want}", got.of(*n)))?;
            }
        }
    }
    Ok(format!("500 random cases, max deviation {worst:.1e}"))
}

// ---- 3 ---------------------------------------------------------------------

fn dyncnet_exhaustive() -> Outcome {
    let costs: BTreeMap<(String, String), f64> =
        [(("a1", "t1"), 100.0), (("a1", "t2"), 300.0), (("a2", "t1"), 200.0), (("a2", "t2"), 150.0)]
            .into_iter()
            .map(|((a, t), c)| ((a.to_string(), t.to_string()), c))
            .collect();
    let mut states = 0;
    for latency in [0, 1] {
        let r = model_check(&ModelConfig {
            latency,
            dyn_cfg: DynConfig { delta: 50.0, timer_period: 2, scope_unit: 20.0 },
            costs: costs.clone(),
            start_within: 2,
            tick_limit: 40,
        });
        check(r.violations.is_empty(), || format!("latency {latency}: {:?}", r.violations.first()))?;
        check(r.unfinished == 0, || format!("latency {latency}: {} runs never reached Executing for both", r.unfinished))?;
        check(r.completed_runs > 0, || format!("latency {latency}: no run completed"))?;
        states += r.states;
    }
    Ok(format!("{states} states over latency 0 and 1, no violation"))
}

// ---- 4 ---------------------------------------------------------------------

fn dyncnet_openness() -> Outcome {
    let period = 10;
    let settings = AgvSettings {
        mode: AssignmentMode::Dyncnet,
        dyn_cfg: DynConfig { delta: 10.0, timer_period: period, scope_unit: 200.0 },
        field_cfg: FieldConfig::default(),
        body: BodyParams::default(),
        assign_radius: 0.0,
        comm_budget: 32,
    };
    let mut s = AgvScenario::new(NetworkConfig::default(), Arc::new(line_graph(12, 10.0)), settings).map_err(|e| e.to_string())?;
    let task = TaskSpec { id: "t1".into(), arrival: 1, pickup: "n5".into(), dropoff: "n0".into(), kind: "regular".into(), priority: 1 };
    s.add_base(vec![task]).map_err(|e| e.to_string())?;
    s.add_agv("near", "n1".into(), "n1".into(), Vec::new()).map_err(|e| e.to_string())?;
    s.add_agv("far", "n10".into(), "n10".into(), Vec::new()).map_err(|e| e.to_string())?;
    let mut killed = None;
    for _ in 0..100 {
        s.step_tick();
        let near = s.agv("near").map(|a| a.participant().state().phase);
        if near == Some(ParticipantPhase::Bound) {
            return Err("near AGV bound before it could be killed".into());
        }
        if near == Some(ParticipantPhase::Intentional) {
            s.kill_agv("near").map_err(|e| e.to_string())?;
            killed = Some(s.world.now());
            break;
        }
    }
    let killed = killed.ok_or("near AGV never became intentional")?;
    for _ in 0..5 * period {
        s.step_tick();
        let t = s.transport("t1").ok_or("transport agent missing")?;
        let st = t.initiator().map(|i| i.state().clone()).ok_or("no initiator")?;
        if st.phase == InitiatorPhase::Executing {
            check(st.provisional_winner.as_deref() == Some("far"), || format!("executing with {:?}", st.provisional_winner))?;
            let took = s.world.now().0 - killed.0;
            check(s.violations.is_empty(), || format!("{:?}", s.violations))?;
            return Ok(format!("reassigned to far {took} ticks after the kill (limit {})", 5 * period));
        }
    }
    Err(format!("not reassigned within {} ticks", 5 * period))
}

// ---- 5 ---------------------------------------------------------------------

fn mutual_exclusion() -> Outcome {
    let mut claims = 0;
    let mut moves = 0;
    for seed in 0..50 {
        let r = lock_drill(grid_graph(4, 5, 1), 5, 200, 150, seed).map_err(|e| e.to_string())?;
        check(r.violation_ticks == 0, || format!("seed {seed}: {} ticks with overlapping locks", r.violation_ticks))?;
        let missing: Vec<&u64> = r.submitted.difference(&r.granted).collect();
        check(missing.is_empty(), || format!("seed {seed}: claims never granted {missing:?}"))?;
        claims += r.submitted.len();
        moves += r.moves;
    }
    Ok(format!("50 seeds, {claims} claims all granted, {moves} moves, no overlap"))
}

// ---- 6 ---------------------------------------------------------------------

fn field_behavior() -> Outcome {
    let cfg = FieldConfig { range_unit_meters: 50.0, age_ticks: 100 };
    let ranges: Vec<f64> = (1..=5).map(|p| cfg.range(p)).collect();
    check(ranges.windows(2).all(|w| w[0] < w[1]), || format!("ranges {ranges:?}"))?;
    let g = line_graph(10, 10.0);
    let field = TaskField::new("t", 1, 5, "n9");
    let mut at = Vertex::from("n0");
    let mut steps = 0;
    while at.as_str() != "n9" && steps < 20 {
        let next = gradient_step(&at, std::slice::from_ref(&field), &g, &cfg);
        check(next != at, || format!("stuck at {at}"))?;
        at = next;
        steps += 1;
    }
    check(steps == 9, || format!("{steps} steps to the source"))?;
    let aged = age_priority(&TaskField::new("t", 1, 2, "n0"), 2 * cfg.age_ticks, &cfg);
    check(aged.priority() == 4, || format!("aged to {}", aged.priority()))?;
    let almost = age_priority(&TaskField::new("t", 1, 2, "n0"), 2 * cfg.age_ticks - 1, &cfg);
    check(almost.priority() == 3, || format!("one tick early gives {}", almost.priority()))?;
    let capped = age_priority(&TaskField::new("t", 1, 4, "n0"), 10 * cfg.age_ticks, &cfg);
    check(capped.priority() == 5, || format!("cap gives {}", capped.priority()))?;
    Ok("ranges increase, 9 steps, 2->4 after 2 T_age, capped at 5".into())
}

// ---- 7 ---------------------------------------------------------------------

fn vehicle_reservations(s: &TrafficScenario, vehicle: &str, graph: &SegmentGraph) -> usize {
    graph
        .nodes()
        .filter_map(|v| s.ia(v))
        .map(|ia| ia.infrastructure().reservations().keys().filter(|(_, who)| who == vehicle).count())
        .sum()
}

fn booking_lifecycle() -> Outcome {
    let cfg = AntConfig::default();
    let (ttl, period) = (cfg.ttl, cfg.refresh_period);

    // Three segments, one booking, acked by every entry and returned.
    let g = line_graph(4, 10.0);
    let mut s = TrafficScenario::new(NetworkConfig::default(), Arc::new(g.clone()), cfg.clone(), 64).map_err(|e| e.to_string())?;
    s.add_vehicle("car", "n0".into(), "n3".into(), 0, true).map_err(|e| e.to_string())?;
    s.run(cfg.explore_lead + 8);
    let car = s.vehicle("car").ok_or("no car")?;
    let first = car.booker().outcomes().first().cloned().ok_or("no booking came back")?;
    let BookingOutcome::Acked(b) = first.1 else { return Err(format!("booking rejected: {first:?}")) };
    check(b.entries.len() == 3 && b.all_acked(), || format!("returned booking {b:?}"))?;
    let ias: Vec<&str> = b.entries.iter().map(|e| e.infrastructure_agent.as_str()).collect();
    check(ias == ["ia-n0", "ia-n1", "ia-n2"], || format!("entry order {ias:?}"))?;

    // Unrefreshed: gone within TTL + P of the last booking.
    let long = line_graph(4, 400.0);
    let mut s = TrafficScenario::new(NetworkConfig::default(), Arc::new(long.clone()), cfg.clone(), 64).map_err(|e| e.to_string())?;
    s.add_vehicle("car", "n0".into(), "n3".into(), 0, false).map_err(|e| e.to_string())?;
    let mut seen = false;
    let mut gone_at = None;
    for _ in 0..300 {
        s.step_tick();
        let held = vehicle_reservations(&s, "car", &long);
        seen |= held > 0;
        if seen && held == 0 && gone_at.is_none() {
            gone_at = Some(s.world.now());
        }
        if gone_at.is_some() && held > 0 {
            return Err("reservation reappeared without refresh".into());
        }
    }
    let car = s.vehicle("car").ok_or("no car")?;
    check(car.core().bookings_sent == 1, || format!("{} bookings sent", car.core().bookings_sent))?;
    let booked = car.core().last_booking.ok_or("never booked")?;
    let gone = gone_at.ok_or("reservation never evaporated")?;
    check(gone.0 <= booked.0 + ttl + period, || format!("booked at {booked}, still held until {gone}"))?;

    // Refreshed: held at every tick across 10 TTL.
    let mut s = TrafficScenario::new(NetworkConfig::default(), Arc::new(long.clone()), cfg.clone(), 64).map_err(|e| e.to_string())?;
    s.add_vehicle("car", "n0".into(), "n3".into(), 0, true).map_err(|e| e.to_string())?;
    let last_edge = long.edge_between(&"n2".into(), &"n3".into()).ok_or("no last edge")?;
    let mut since = None;
    while s.world.now().0 < 10 * ttl + 20 {
        s.step_tick();
        let held = s.ia(&"n2".into()).is_some_and(|ia| ia.infrastructure().reservation(last_edge, "car").is_some());
        match (held, since) {
            (true, None) => since = Some(s.world.now()),
            (false, Some(from)) => return Err(format!("reservation lost at {} (held since {from})", s.world.now())),
            _ => {}
        }
    }
    let from = since.ok_or("never reserved")?;
    check(s.world.now().0 - from.0 >= 10 * ttl, || format!("held only from {from}"))?;
    Ok(format!("3 entries acked in order; unrefreshed gone at {gone} (booked {booked}); refreshed held {} ticks", s.world.now().0 - from.0))
}

// ---- 8 ---------------------------------------------------------------------

fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> SegmentGraph {
    let mut g = SegmentGraph::new(false);
    for i in 0..n {
        g.add_node(format!("v{i}").as_str()).unwrap();
    }
    let mut pairs = BTreeSet::new();
    for i in 1..n {
        pairs.insert((rng.gen_range(0..i), i));
    }
    for _ in 0..rng.gen_range(0..=n) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    for (k, (a, b)) in pairs.into_iter().enumerate() {
        let len = rng.gen_range(1..=10) as f64;
        g.add_edge(k as u32 + 1, format!("v{a}").as_str(), format!("v{b}").as_str(), len).unwrap();
    }
    g
}

/// Every simple path from `at` to `to` no longer than `max`, by DFS.
fn brute_paths(g: &SegmentGraph, path: &mut Vec<Vertex>, to: &Vertex, len: f64, max: f64, out: &mut BTreeSet<GraphPath>) {
    let at = path.last().unwrap().clone();
    if &at == to {
        out.insert(GraphPath::new(path.clone()));
        return;
    }
    for (e, next) in g.neighbors(&at).to_vec() {
        let l = len + g.edge(e).unwrap().length;
        if path.contains(&next) || l > max {
            continue;
        }
        path.push(next);
        brute_paths(g, path, to, l, max, out);
        path.pop();
    }
}

fn exploration_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total = 0;
    for case in 0..20 {
        let n = rng.gen_range(3..=12);
        let g = random_connected_graph(&mut rng, n);
        let origin = Vertex::from("v0");
        let dest = Vertex::new(format!("v{}", rng.gen_range(1..n)));
        let shortest = g.distance(&origin, &dest).map_err(|e| e.to_string())?;
        let max = shortest * rng.gen_range(1.0..2.0);
        let mut want = BTreeSet::new();
        brute_paths(&g, &mut vec![origin.clone()], &dest, 0.0, max, &mut want);
        let got = explore_paths(Arc::new(g), &origin, &dest, max, n as u32, NetworkConfig::default()).map_err(|e| e.to_string())?;
        check(got == want, || format!("case {case}: ants found {} paths, oracle {}", got.len(), want.len()))?;
        total += want.len();
    }
    Ok(format!("20 graphs, {total} paths, sets equal"))
}

// ---- 9 ---------------------------------------------------------------------

fn language() -> ContentLanguage {
    let mut lang = ContentLanguage::new();
    agv::register_schemas(&mut lang);
    ants::register_schema(&mut lang);
    lang
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..8);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn sample(rng: &mut ChaCha8Rng, d: &Domain) -> Value {
    match d {
        Domain::Priority => Value::Int(rng.gen_range(1..=5)),
        Domain::Count => Value::Int(rng.gen_range(0..1_000_000)),
        Domain::Meters => Value::Num(if rng.gen_bool(0.3) { rng.gen_range(0..500) as f64 } else { rng.gen_range(0.0..1e4) }),
        Domain::Ident => Value::Text(word(rng)),
        Domain::Node => Value::Node(Vertex::new(word(rng))),
        Domain::Path => {
            let n = rng.gen_range(1..6);
            Value::Path(GraphPath::new((0..n).map(|_| Vertex::new(word(rng))).collect()))
        }
        Domain::Booking => {
            let g = line_graph(5, 10.0);
            let hops = rng.gen_range(1..5);
            let path = GraphPath::new((0..=hops).map(|i| Vertex::new(format!("n{i}"))).collect());
            let mut b = plan_booking(rng.gen_range(0..1000), &word(rng), &path, &g, Tick(rng.gen_range(0..100)), 2.0).unwrap();
            let acked = rng.gen_range(0..=b.entries.len());
            for e in &mut b.entries[..acked] {
                e.acked = true;
            }
            Value::Booking(b)
        }
        Domain::OneOf(words) => Value::Text(words[rng.gen_range(0..words.len())].clone()),
        Domain::Text => {
            let parts: Vec<String> = (0..rng.gen_range(0..4)).map(|_| word(rng)).collect();
            Value::Text(parts.join(" "))
        }
    }
}

fn bad_tokens(d: &Domain) -> Vec<String> {
    let overlapping = r#"{"booking_id":1,"vehicle_id":"c","entries":[{"infrastructure_agent":"ia-a","edge_id":1,"window":[0,5],"acked":false},{"infrastructure_agent":"ia-b","edge_id":2,"window":[3,8],"acked":false}],"last_refresh_tick":0}"#;
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    match d {
        Domain::Priority => v(&["0", "6", "-1", "x", "01", "2.0"]),
        Domain::Count => v(&["-1", "1.5", "x", "", "007"]),
        Domain::Meters => v(&["-1", "NaN", "inf", "x", "", "1e3"]),
        Domain::Ident | Domain::Node => v(&["", "a b", "a>b", "\t"]),
        Domain::Path => v(&["", "a>>b", "a b>c", ">a"]),
        Domain::Booking => vec!["{}".into(), "x".into(), overlapping.into(), r#"{"booking_id":1,"vehicle_id":"c","entries":[],"last_refresh_tick":0}"#.into()],
        Domain::OneOf(_) => v(&["", "no-such-word"]),
        Domain::Text => Vec::new(),
    }
}

fn codec_laws() -> Outcome {
    let lang = language();
    let schemas: Vec<(String, String)> = lang
        .protocols()
        .flat_map(|p| lang.performatives(p).map(move |(perf, _)| (p.clone(), perf.clone())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rejected = 0;
    for i in 0..1000u64 {
        let (protocol, perf) = &schemas[rng.gen_range(0..schemas.len())];
        let fields = lang.schema(protocol, perf).unwrap().to_vec();
        let content: Vec<(&str, Value)> = fields.iter().map(|f| (f.name.as_str(), sample(&mut rng, &f.domain))).collect();
        let data = MessageData::new(i, i / 3, word(&mut rng), word(&mut rng), protocol, perf, content);
        let wire = lang.encode(&data).map_err(|e| format!("message {i}: {e}"))?;
        let back = lang.decode(&wire).map_err(|e| format!("message {i}: {e}"))?;
        check(back == data, || format!("message {i}: decode(encode(d)) != d"))?;
        let again = lang.encode(&back).map_err(|e| e.to_string())?;
        check(again == wire, || format!("message {i}: encode(decode(m)) != m"))?;
        let raw = Message::from_wire(&wire.to_wire()).map_err(|e| e.to_string())?;
        check(raw == wire, || format!("message {i}: wire form changed"))?;
        for (k, f) in fields.iter().enumerate() {
            for bad in bad_tokens(&f.domain) {
                let mut m = wire.clone();
                m.content[k] = bad.clone();
                check(matches!(lang.decode(&m), Err(situated::codec::CodecError::Malformed(_))), || {
                    format!("message {i}: {bad:?} accepted for {} ({:?})", f.name, f.domain)
                })?;
                rejected += 1;
            }
        }
    }
    Ok(format!("1000 messages round-trip both ways, {rejected} out-of-domain tokens rejected"))
}

// ---- 10 --------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut names = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    entries.sort();
    check(!entries.is_empty(), || "no bundled scenarios".into())?;
    for path in entries {
        let loaded = load_config(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let seed = loaded.config.scenario.seed;
        let run = |s: u64| run_scenario(&loaded, Some(s), None).map(|o| (o.metrics.trace_hash, o.trace, o.metrics));
        let (h1, t1, m1) = run(seed).map_err(|e| e.to_string())?;
        let (h2, t2, m2) = run(seed).map_err(|e| e.to_string())?;
        let (h3, _, _) = run(seed + 1).map_err(|e| e.to_string())?;
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        check(h1 == h2 && t1 == t2 && m1 == m2, || format!("{name}: same seed gave {h1:016x} and {h2:016x}"))?;
        check(h1 != h3, || format!("{name}: seeds {seed} and {} share hash {h1:016x}", seed + 1))?;
        names.push(name);
    }
    Ok(format!("{} stable per seed, distinct across seeds", names.join(", ")))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("free-flow commitment arithmetic", Duration::from_secs(1), commitment_arithmetic),
        ("free-flow oracle equivalence", Duration::from_secs(5), oracle_equivalence),
        ("DynCNET exhaustive safety", Duration::from_secs(60), dyncnet_exhaustive),
        ("DynCNET openness", Duration::from_secs(5), dyncnet_openness),
        ("mutual-exclusion safety", Duration::from_secs(30), mutual_exclusion),
        ("field behavior", Duration::from_secs(1), field_behavior),
        ("ant booking lifecycle", Duration::from_secs(5), booking_lifecycle),
        ("exploration equivalence", Duration::from_secs(10), exploration_equivalence),
        ("codec laws", Duration::from_secs(5), codec_laws),
        ("determinism", Duration::from_secs(10), determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let verdict = match result {
            Ok(detail) if took <= *limit => format!("PASS {:>2} {name}: {detail} ({took:.2?})", i + 1),
            Ok(detail) => {
                failed += 1;
                format!("FAIL {:>2} {name}: {detail}, but took {took:.2?} (limit {limit:?})", i + 1)
            }
            Err(why) => {
                failed += 1;
                format!("FAIL {:>2} {name}: {why} ({took:.2?})", i + 1)
            }
        };
        println!("{verdict}");
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
