//! Pipeline drivers shared by the integration and acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use dds_core::backends::{shared_ddm, shared_wfm, InstantDdm, InstantWfm};
use dds_core::clock::VirtualClock;
use dds_core::model::*;
use dds_core::pipeline::*;
use dds_core::store::*;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use crate::oracles::graphs::{self, Graph};

/// Per-template cap used for graphs that fire forever.
pub fn cap(template: usize) -> u32 {
    1 + (template as u32 % 3)
}

/// Workflow-wide cap for graphs that fire forever.
pub const TOTAL_CAP: u32 = 7;

/// Templates `t0..`, each reading an empty dataset so Works finish without
/// jobs. Graphs that fire forever get small caps.
pub fn graph_workflow(g: &Graph) -> Workflow {
    let capped = g.fires_forever();
    let mut wf = Workflow::new("g");
    for i in 0..g.n {
        let mut t = WorkTemplate::processing(&format!("t{i}"), CollectionSpec::new("s", "empty"));
        t.is_entry = g.entry[i];
        if capped {
            t.max_instantiations = cap(i);
        }
        wf.templates.push(t);
    }
    for &(s, d, fires) in &g.edges {
        let p = if fires { PredicateExpr::always() } else { PredicateExpr::never() };
        wf.conditions
            .push(ConditionBranch::new(&format!("t{s}"), p, &[&format!("t{d}")]));
    }
    if capped {
        wf.max_total_works = TOTAL_CAP;
    }
    wf
}

/// What the pipeline made of one graph.
#[derive(Debug)]
pub struct GraphRun {
    pub status: RequestStatus,
    pub works: Vec<WorkRecord>,
}

impl GraphRun {
    fn template(w: &WorkRecord) -> usize {
        w.work.template_name[1..].parse().unwrap()
    }

    /// Template path from the entry Work down to each Work.
    pub fn paths(&self) -> Vec<(Vec<usize>, &WorkRecord)> {
        let by_id: HashMap<&str, &WorkRecord> = self.works.iter().map(|w| (w.work.work_id.as_str(), w)).collect();
        self.works
            .iter()
            .map(|w| {
                let mut path = vec![Self::template(w)];
                let mut at = w;
                while let Some(p) = &at.parent {
                    at = by_id[p.as_str()];
                    path.push(Self::template(at));
                }
                path.reverse();
                (path, w)
            })
            .collect()
    }

    pub fn path_multiset(&self) -> BTreeMap<Vec<usize>, usize> {
        let mut out = BTreeMap::new();
        for (p, _) in self.paths() {
            *out.entry(p).or_insert(0) += 1;
        }
        out
    }

    /// Checks the run against the graph: exact equality with the oracle
    /// when the graph terminates by itself, caps plus maximality otherwise.
    pub fn check(&self, g: &Graph) -> Result<(), String> {
        if !self.status.is_terminal() {
            return Err(format!("request left in {:?}", self.status));
        }
        for (p, w) in self.paths() {
            if w.work.generation as usize + 1 != p.len() {
                return Err(format!("{} has generation {} on a path of {}", w.work.work_id, w.work.generation, p.len()));
            }
        }
        match graphs::works(g) {
            Some(expected) => {
                let got = self.path_multiset();
                if got != expected {
                    return Err(format!("works {got:?}, oracle {expected:?}"));
                }
                Ok(())
            }
            None => self.check_capped(g),
        }
    }

    fn check_capped(&self, g: &Graph) -> Result<(), String> {
        let total = self.works.len() as u32;
        let sum_caps: u32 = (0..g.n).map(cap).sum();
        if total > TOTAL_CAP.min(sum_caps) {
            return Err(format!("{total} works over the caps"));
        }
        let mut per = vec![0u32; g.n];
        for w in &self.works {
            per[Self::template(w)] += 1;
        }
        for t in 0..g.n {
            if per[t] > cap(t) {
                return Err(format!("t{t} has {} works, cap {}", per[t], cap(t)));
            }
        }
        // Every Work lies on a firing path from an entry, and a firing
        // edge is left unfollowed only when a cap binds.
        let mut children: HashMap<(&str, usize), usize> = HashMap::new();
        for w in &self.works {
            if let Some(p) = &w.parent {
                *children.entry((p.as_str(), Self::template(w))).or_insert(0) += 1;
            }
        }
        for (path, w) in self.paths() {
            if !g.entry[path[0]] {
                return Err(format!("{path:?} starts at a non-entry template"));
            }
            for pair in path.windows(2) {
                if !g.edges.iter().any(|&(s, d, f)| f && s == pair[0] && d == pair[1]) {
                    return Err(format!("{path:?} follows a non-firing edge"));
                }
            }
            let t = Self::template(w);
            for d in 0..g.n {
                let want = g.edges.iter().filter(|&&(s, dd, f)| f && s == t && dd == d).count();
                let got = children.get(&(w.work.work_id.as_str(), d)).copied().unwrap_or(0);
                if got > want || (got < want && per[d] < cap(d) && total < TOTAL_CAP) {
                    return Err(format!("{} has {got} children in t{d}, {want} edges, no cap binding", w.work.work_id));
                }
            }
        }
        Ok(())
    }
}

/// Submits every graph to one store and drives the daemons on virtual time
/// until they are idle. Requests are independent, so batching them only
/// saves setup.
pub fn run_graphs(batch: &[Graph]) -> Vec<GraphRun> {
    let clock = VirtualClock::new(0);
    let store = Store::in_memory(Arc::new(clock.clone()));
    let backends = Backends {
        ddm: shared_ddm(InstantDdm::new().with_dataset("s", "empty", Vec::new())),
        wfm: shared_wfm(InstantWfm::new()),
    };
    let ids: Vec<String> = batch
        .iter()
        .map(|g| submit(&store, &graph_workflow(g), "u", "c").unwrap().request_id)
        .collect();
    let mut p = Pipeline::new(store.clone(), backends, Arc::new(MemoryTransport::auto_ack()), DaemonConfig::new("g"));
    p.run_virtual(&clock, 1_000_000).unwrap();
    let mut by_req: HashMap<String, Vec<WorkRecord>> = HashMap::new();
    for w in store.list::<WorkRecord>(None, None).unwrap() {
        by_req.entry(w.request_id.clone()).or_default().push(w);
    }
    ids.iter()
        .map(|id| GraphRun {
            status: store.get::<Request>(id).unwrap().status,
            works: by_req.remove(id).unwrap_or_default(),
        })
        .collect()
}

// ---- random well-formed workflows ----

const ALPHABET: &[char] = &['a', 'b', 'z', '0', '9', '_', '-', '.', ' ', '"', '\\', '/', '\n', '\t', 'é', '数', '🦀', '\u{7f}'];

fn text(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

fn value_of(rng: &mut impl Rng, ty: ParamType) -> ParamValue {
    match ty {
        ParamType::Bool => ParamValue::Bool(rng.gen()),
        ParamType::Int => ParamValue::Int(match rng.gen_range(0..3) {
            0 => rng.gen(),
            1 => rng.gen_range(-10..10),
            _ => *[i64::MIN, i64::MAX, 0].choose(rng).unwrap(),
        }),
        ParamType::Float => ParamValue::Float(match rng.gen_range(0..4) {
            0 => rng.gen_range(-1e6..1e6),
            1 => f64::from_bits(rng.gen::<u64>() & !(0x7ff << 52)) * 1e300,
            2 => *[0.0, -0.0, 1.0, 1e-308, f64::MAX, f64::MIN_POSITIVE, 0.1].choose(rng).unwrap(),
            _ => rng.gen_range(-100i32..100) as f64,
        }),
        ParamType::String => ParamValue::Str(text(rng, 8)),
    }
}

fn any_type(rng: &mut impl Rng) -> ParamType {
    *[ParamType::Bool, ParamType::Int, ParamType::Float, ParamType::String].choose(rng).unwrap()
}

fn any_value(rng: &mut impl Rng) -> ParamValue {
    let ty = any_type(rng);
    value_of(rng, ty)
}

fn payload(rng: &mut impl Rng, depth: u32) -> serde_json::Value {
    match rng.gen_range(0..if depth == 0 { 4 } else { 6 }) {
        0 => json!(null),
        1 => json!(rng.gen::<bool>()),
        2 => json!(rng.gen_range(-1e9..1e9)),
        3 => json!(text(rng, 6)),
        4 => serde_json::Value::Array((0..rng.gen_range(0..3)).map(|_| payload(rng, depth - 1)).collect()),
        _ => serde_json::Value::Object((0..rng.gen_range(0..3)).map(|_| (text(rng, 4), payload(rng, depth - 1))).collect()),
    }
}

/// A name with placeholders drawn from `params`.
fn templated(rng: &mut impl Rng, params: &[ParamSlot]) -> String {
    let mut s = text(rng, 6);
    if !params.is_empty() && rng.gen_bool(0.4) {
        s.push_str(&format!("%{{{}}}", params.choose(rng).unwrap().name));
        s.push_str(&text(rng, 3));
    }
    s
}

fn collection(rng: &mut impl Rng, params: &[ParamSlot]) -> CollectionSpec {
    let (scope, name) = (templated(rng, params), templated(rng, params));
    if !rng.gen_bool(0.3) {
        return CollectionSpec::new(&scope, &name);
    }
    let mut files: Vec<FileSpec> = Vec::new();
    for i in 0..rng.gen_range(0..5) {
        let depends_on = files
            .iter()
            .filter(|_| rng.gen_bool(0.3))
            .map(|f| f.name.clone())
            .collect();
        files.push(FileSpec {
            name: format!("f{i}{}", text(rng, 3)),
            size_bytes: rng.gen(),
            depends_on,
            payload: rng.gen_bool(0.5).then(|| payload(rng, 2)),
        });
    }
    CollectionSpec::inline(&scope, &name, files)
}

fn value_ref(rng: &mut impl Rng, source: &WorkTemplate) -> ValueRef {
    match rng.gen_range(0..3) {
        0 => ValueRef::Status,
        1 if !source.parameters.is_empty() => ValueRef::Binding(source.parameters.choose(rng).unwrap().name.clone()),
        _ => ValueRef::Metric(text(rng, 5)),
    }
}

fn predicate(rng: &mut impl Rng, source: &WorkTemplate, depth: u32) -> PredicateExpr {
    let cmp = *[CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge].choose(rng).unwrap();
    match rng.gen_range(0..if depth == 0 { 2 } else { 5 }) {
        0 => PredicateExpr::Literal { value: rng.gen() },
        1 => PredicateExpr::Compare {
            cmp,
            left: value_ref(rng, source),
            right: any_value(rng),
        },
        2 => PredicateExpr::and((0..rng.gen_range(0..3)).map(|_| predicate(rng, source, depth - 1)).collect()),
        3 => PredicateExpr::or((0..rng.gen_range(0..3)).map(|_| predicate(rng, source, depth - 1)).collect()),
        _ => PredicateExpr::not(predicate(rng, source, depth - 1)),
    }
}

fn param_expr(rng: &mut impl Rng, source: &WorkTemplate, depth: u32) -> ParamExpr {
    match rng.gen_range(0..if depth == 0 { 3 } else { 4 }) {
        0 => ParamExpr::Literal(any_value(rng)),
        1 if !source.parameters.is_empty() => ParamExpr::Binding(source.parameters.choose(rng).unwrap().name.clone()),
        1 | 2 => ParamExpr::Metric(text(rng, 5)),
        _ => ParamExpr::add(param_expr(rng, source, depth - 1), param_expr(rng, source, depth - 1)),
    }
}

/// A random workflow that passes validation, exercising every field of the
/// wire schema: all value types, inline file lists with payloads, nested
/// predicates, parameter expressions and both triggers.
pub fn random_workflow(rng: &mut impl Rng) -> Workflow {
    let mut wf = Workflow::new(&text(rng, 10));
    for i in 0..rng.gen_range(1..6) {
        let mut params = Vec::new();
        for j in 0..rng.gen_range(0..4) {
            let ty = any_type(rng);
            let mut slot = ParamSlot::new(&format!("p{j}"), ty);
            if rng.gen_bool(0.7) {
                slot.default = Some(value_of(rng, ty));
            } else {
                wf.initial_bindings.insert(slot.name.clone(), value_of(rng, ty));
            }
            params.push(slot);
        }
        let mut t = WorkTemplate::processing(&format!("t{i}{}", text(rng, 3)), collection(rng, &params));
        t.output_spec = collection(rng, &params);
        t.executable_spec = if rng.gen_bool(0.2) { String::new() } else { templated(rng, &params) };
        t.work_kind = if rng.gen_bool(0.3) { WorkKind::DecisionMaking } else { WorkKind::Processing };
        t.is_entry = i == 0 || rng.gen_bool(0.3);
        t.max_instantiations = rng.gen_range(1..=u32::MAX);
        t.parameters = params;
        wf.templates.push(t);
    }
    for _ in 0..rng.gen_range(0..3) {
        wf.initial_bindings.insert(format!("x{}", text(rng, 3)), any_value(rng));
    }
    for _ in 0..rng.gen_range(0..5) {
        let source = wf.templates.choose(rng).unwrap().clone();
        let mut c = ConditionBranch::new(&source.name, predicate(rng, &source, 3), &[]);
        for _ in 0..rng.gen_range(1..3) {
            let dest = wf.templates.choose(rng).unwrap();
            let mut param_map = BTreeMap::new();
            for p in &dest.parameters {
                if rng.gen_bool(0.5) {
                    param_map.insert(p.name.clone(), param_expr(rng, &source, 2));
                }
            }
            c.destinations.push(Destination {
                template: dest.name.clone(),
                param_map,
            });
        }
        if rng.gen_bool(0.3) {
            c = c.on_activation();
        }
        wf.conditions.push(c);
    }
    let entries = wf.templates.iter().filter(|t| t.is_entry).count() as u32;
    wf.max_total_works = rng.gen_range(entries..=u32::MAX);
    wf
}

// ---- wire rejection suite ----

use dds_core::wire::{WireError, WireRequest};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Syntax,
    Version,
    Invalid,
}

fn classify(r: &Result<WireRequest, WireError>) -> Option<Expect> {
    match r {
        Ok(_) => None,
        Err(WireError::Syntax { .. }) => Some(Expect::Syntax),
        Err(WireError::Version(_)) => Some(Expect::Version),
        Err(WireError::Invalid(_)) => Some(Expect::Invalid),
    }
}

fn with(doc: &Value, f: impl FnOnce(&mut Value)) -> String {
    let mut v = doc.clone();
    f(&mut v);
    v.to_string()
}

/// Schema objects of `doc` (not free-form maps or payloads), as JSON
/// pointers.
fn schema_objects(doc: &Value) -> Vec<String> {
    let mut out = vec![String::new(), "/workflow".to_string()];
    let wf = &doc["workflow"];
    for (i, t) in wf["templates"].as_array().unwrap().iter().enumerate() {
        let at = format!("/workflow/templates/{i}");
        out.push(format!("{at}/input_spec"));
        out.push(format!("{at}/output_spec"));
        for (j, _) in t["parameters"].as_array().into_iter().flatten().enumerate() {
            out.push(format!("{at}/parameters/{j}"));
        }
        for (j, _) in t["input_spec"]["files"].as_array().into_iter().flatten().enumerate() {
            out.push(format!("{at}/input_spec/files/{j}"));
        }
        out.push(at);
    }
    for (i, c) in wf["conditions"].as_array().into_iter().flatten().enumerate() {
        let at = format!("/workflow/conditions/{i}");
        out.push(format!("{at}/predicate"));
        for (j, _) in c["destinations"].as_array().unwrap().iter().enumerate() {
            out.push(format!("{at}/destinations/{j}"));
        }
        out.push(at);
    }
    out
}

/// Mutations of a valid request and the error each must produce. Every
/// schema object gets an unknown field; the rest cover version, missing
/// and mistyped fields, broken syntax and semantic invalidity.
pub fn rejection_cases(req: &WireRequest) -> Vec<(String, String, Expect)> {
    let text = req.render();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let mut cases = Vec::new();
    for ptr in schema_objects(&doc) {
        let m = with(&doc, |v| {
            v.pointer_mut(&ptr).unwrap().as_object_mut().unwrap().insert("zz_unknown".into(), json!(1));
        });
        cases.push((format!("unknown field at '{ptr}'"), m, Expect::Syntax));
    }
    for version in [0, 2, 999] {
        cases.push((format!("wire_version {version}"), with(&doc, |v| v["wire_version"] = json!(version)), Expect::Version));
    }
    for field in ["wire_version", "workflow", "consumer"] {
        let m = with(&doc, |v| {
            v.as_object_mut().unwrap().remove(field);
        });
        cases.push((format!("missing {field}"), m, Expect::Syntax));
    }
    for field in ["name", "work_kind", "input_spec", "output_spec"] {
        let m = with(&doc, |v| {
            v["workflow"]["templates"][0].as_object_mut().unwrap().remove(field);
        });
        cases.push((format!("template without {field}"), m, Expect::Syntax));
    }
    let typed: [(&str, &str, Value); 5] = [
        ("/workflow", "max_total_works", json!("many")),
        ("/workflow", "max_total_works", json!(-1)),
        ("/workflow/templates/0", "is_entry", json!(1)),
        ("/workflow/templates/0", "work_kind", json!("batch")),
        ("", "consumer", json!(null)),
    ];
    for (ptr, field, bad) in typed {
        let m = with(&doc, |v| {
            v.pointer_mut(ptr).unwrap()[field] = bad.clone();
        });
        cases.push((format!("{field} = {bad}"), m, Expect::Syntax));
    }
    if doc["workflow"]["conditions"].as_array().is_some_and(|c| !c.is_empty()) {
        let m = with(&doc, |v| v["workflow"]["conditions"][0]["predicate"] = json!({"op": "xor", "args": []}));
        cases.push(("unknown predicate op".into(), m, Expect::Syntax));
        let m = with(&doc, |v| v["workflow"]["conditions"][0]["trigger"] = json!("sometimes"));
        cases.push(("unknown trigger".into(), m, Expect::Syntax));
    }
    let half = (0..=text.len() / 2).rev().find(|&i| text.is_char_boundary(i)).unwrap();
    cases.push(("truncated".into(), text[..half].to_string(), Expect::Syntax));
    cases.push(("trailing garbage".into(), format!("{text} x"), Expect::Syntax));
    cases.push(("two documents".into(), format!("{text}{text}"), Expect::Syntax));
    cases.push(("empty".into(), String::new(), Expect::Syntax));
    cases.push(("array".into(), format!("[{text}]"), Expect::Syntax));
    cases.push((
        "duplicate key".into(),
        format!("{{\"consumer\":\"a\",{}", &text[1..]),
        Expect::Syntax,
    ));
    let m = with(&doc, |v| {
        let t = v["workflow"]["templates"][0].clone();
        v["workflow"]["templates"].as_array_mut().unwrap().push(t);
    });
    cases.push(("duplicate template".into(), m, Expect::Invalid));
    let m = with(&doc, |v| {
        for t in v["workflow"]["templates"].as_array_mut().unwrap() {
            t["is_entry"] = json!(false);
        }
    });
    cases.push(("no entry template".into(), m, Expect::Invalid));
    let m = with(&doc, |v| {
        v["workflow"]["conditions"]
            .as_array_mut()
            .unwrap()
            .push(json!({"source_template": "nowhere", "predicate": {"op": "literal", "value": true}, "destinations": []}));
    });
    cases.push(("unknown source template".into(), m, Expect::Invalid));
    let m = with(&doc, |v| v["workflow"]["templates"][0]["max_instantiations"] = json!(0));
    cases.push(("zero cap".into(), m, Expect::Invalid));
    let m = with(&doc, |v| v["workflow"]["templates"][0]["executable_spec"] = json!("run %{nope}"));
    cases.push(("unknown placeholder".into(), m, Expect::Invalid));
    cases
}

/// Runs the rejection cases. Returns how many were checked.
pub fn check_rejections(req: &WireRequest) -> Result<usize, String> {
    let cases = rejection_cases(req);
    for (what, text, want) in &cases {
        let got = classify(&WireRequest::parse_valid(text));
        if got != Some(*want) {
            return Err(format!("{what}: expected {want:?}, got {got:?}"));
        }
    }
    Ok(cases.len())
}

/// render -> parse -> render is byte-identical, and the pretty form parses
/// to the same document.
pub fn check_round_trip(req: &WireRequest) -> Result<(), String> {
    let text = req.render();
    let back = WireRequest::parse_valid(&text).map_err(|e| e.to_string())?;
    if back.render() != text {
        let again = back.render();
        let at = text.bytes().zip(again.bytes()).take_while(|(a, b)| a == b).count();
        let from = (0..=at.saturating_sub(40)).rev().find(|&i| text.is_char_boundary(i)).unwrap();
        return Err(format!("re-render differs after byte {at}:\n...{}\n...{}", &text[from..(from + 120).min(text.len())], &again[from..(from + 120).min(again.len())]));
    }
    let pretty = WireRequest::parse_valid(&req.render_pretty()).map_err(|e| e.to_string())?;
    if pretty.render() != text {
        return Err("pretty form parses to a different document".into());
    }
    Ok(())
}

// ---- crash harness ----

use dds_core::backends::{ClockConfig, ComputeSimConfig, Scenario, TapeSimConfig};
use dds_core::carousel::{carousel_workflow, CarouselBackends, CarouselPolicy};
use dds_core::clock::Clock;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three files landing at 1, 2 and 3 s on one worker; a seeded share of
/// jobs fails so retries are part of every trial.
pub fn three_file_carousel(seed: u64) -> Scenario {
    let mut compute = ComputeSimConfig::new(1, 1.0);
    compute.failure_rate = 0.25;
    compute.seed = seed;
    compute.resubmit_delay = 1.0;
    Scenario {
        tape: TapeSimConfig::explicit("tape", "raw", &[("f1", 10, 1.0), ("f2", 20, 2.0), ("f3", 30, 3.0)]),
        compute,
        clock: ClockConfig::default(),
    }
}

const NAMES: [&str; 5] = ["clerk", "marshaller", "transformer", "carrier", "conductor"];

fn daemon(i: usize, store: Store, backends: &Backends, transport: &Arc<MemoryTransport>, life: u32) -> Box<dyn Daemon> {
    let cfg = DaemonConfig::new(&format!("w/{}#{life}", NAMES[i]));
    let stats = Arc::new(PipelineStats::default());
    match i {
        0 => Box::new(Clerk::new(store, cfg, stats)),
        1 => Box::new(Marshaller::new(store, cfg, stats)),
        2 => Box::new(Transformer::new(store, cfg, stats, backends.clone())),
        3 => Box::new(Carrier::new(store, cfg, stats, backends.clone())),
        _ => Box::new(Conductor::new(store, cfg, stats, transport.clone())),
    }
}

#[derive(Debug)]
pub struct CrashTrial {
    pub kills: usize,
    pub process_crashes: usize,
    pub status: RequestStatus,
    pub store: Store,
}

/// One seeded trial: every daemon is killed once after a random number of
/// its own commits and restarted under a new identity (so it must wait out
/// the dead one's leases). In every third trial one of the kills takes the
/// whole process down, possibly mid-record, and everything restarts from
/// the log.
pub fn crash_trial(seed: u64) -> Result<CrashTrial, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = three_file_carousel(seed);
    let backends = CarouselBackends::from_scenario(&scenario)
        .map_err(|e| e.to_string())?
        .pipeline_backends();
    let clock = VirtualClock::new(0);
    let (mut store, log) = Store::with_memory_log(Arc::new(clock.clone()));
    let wf = carousel_workflow(&CollectionSpec::new("tape", "raw"), &CarouselPolicy::file_level());
    let req = submit(&store, &wf, "u", "c").map_err(|e| e.to_string())?;
    let transport = Arc::new(MemoryTransport::auto_ack());

    let process_victim = (seed % 3 == 0).then(|| rng.gen_range(0..5));
    let plan = |i: usize, rng: &mut ChaCha8Rng| {
        let after = rng.gen_range(0..12);
        if Some(i) == process_victim {
            let mut p = FaultPlan::process(after);
            p.torn = rng.gen_bool(0.5);
            p
        } else {
            FaultPlan::handle(after)
        }
    };
    let mut life = [0u32; 5];
    let mut armed = [true; 5];
    let mut daemons: Vec<Box<dyn Daemon>> = (0..5)
        .map(|i| daemon(i, store.with_fault(plan(i, &mut rng)), &backends, &transport, 0))
        .collect();
    let (mut kills, mut process_crashes, mut idle) = (0, 0, 0);
    for _ in 0..100_000 {
        let before = store.write_seq();
        let mut down = false;
        for i in 0..5 {
            match daemons[i].step() {
                Ok(_) => {}
                Err(StoreError::Crashed) if store.is_crashed() => {
                    down = true;
                    break;
                }
                Err(StoreError::Crashed) => {
                    kills += 1;
                    armed[i] = false;
                    life[i] += 1;
                    daemons[i] = daemon(i, store.clone(), &backends, &transport, life[i]);
                }
                Err(e) => return Err(format!("daemon {}: {e}", NAMES[i])),
            }
        }
        if down {
            process_crashes += 1;
            armed = [false; 5];
            store = Store::open(Box::new(log.clone()), Arc::new(clock.clone())).map_err(|e| e.to_string())?;
            daemons = (0..5)
                .map(|i| {
                    life[i] += 1;
                    daemon(i, store.clone(), &backends, &transport, life[i])
                })
                .collect();
            continue;
        }
        if store.write_seq() != before {
            idle = 0;
            continue;
        }
        let status = store.get::<Request>(&req.request_id).map_err(|e| e.to_string())?.status;
        if status.is_terminal() && armed.iter().all(|a| !a) {
            return Ok(CrashTrial {
                kills,
                process_crashes,
                status,
                store,
            });
        }
        // Kills not yet reached stay armed; daemons that are about to
        // idle forever are killed here instead.
        if status.is_terminal() {
            for i in 0..5 {
                if armed[i] {
                    armed[i] = false;
                    kills += 1;
                    life[i] += 1;
                    daemons[i] = daemon(i, store.clone(), &backends, &transport, life[i]);
                }
            }
            continue;
        }
        let now = clock.now();
        let next = [
            backends.ddm.lock().next_event_time(now),
            backends.wfm.lock().next_event_time(now),
            store.next_lease_expiry(),
        ]
        .into_iter()
        .flatten()
        .filter(|&t| t > now)
        .min();
        match next {
            Some(t) => {
                clock.advance_to(t);
            }
            None if idle < 10 => {
                idle += 1;
                clock.advance(1_000);
            }
            None => {
                let mut dump = String::new();
                for w in store.list::<WorkRecord>(None, None).unwrap() {
                    dump += &format!("\n work {} {:?}", w.work.work_id, w.work.status);
                }
                for c in store.list::<Content>(None, None).unwrap() {
                    dump += &format!("\n content {} {:?} {:?} attempts {}", c.content_id, c.kind, c.status, c.attempt_count);
                }
                for p in store.list::<Processing>(None, None).unwrap() {
                    dump += &format!("\n processing {:?}", p);
                }
                dump += &format!("\n kills {kills} lives {life:?} armed {armed:?} now {}", clock.now());
                return Err(format!("stuck in {status:?}{dump}"));
            }
        }
    }
    Err("did not settle".into())
}

/// No entity created twice, no content processed twice, every input
/// settled.
pub fn audit_consistent(store: &Store) -> Result<(), String> {
    let audit = store.audit().map_err(|e| e.to_string())?;
    let mut created = BTreeMap::<(Kind, String), u32>::new();
    let mut processed = BTreeMap::<String, u32>::new();
    for e in &audit {
        if e.from.is_none() {
            *created.entry((e.kind, e.id.clone())).or_default() += 1;
        }
        if e.kind == Kind::Content && e.to == "Processed" {
            *processed.entry(e.id.clone()).or_default() += 1;
        }
    }
    if let Some(((k, id), n)) = created.iter().find(|(_, &n)| n != 1) {
        return Err(format!("{k:?} {id} created {n} times"));
    }
    if let Some((id, n)) = processed.iter().find(|(_, &n)| n != 1) {
        return Err(format!("content {id} processed {n} times"));
    }
    let works = store.list::<WorkRecord>(None, None).map_err(|e| e.to_string())?;
    if works.len() != 1 {
        return Err(format!("{} works", works.len()));
    }
    let inputs: Vec<Content> = store
        .list::<Content>(None, None)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|c| c.kind == CollectionKind::Input)
        .collect();
    if inputs.len() != 3 || inputs.iter().any(|c| !matches!(c.status, ContentStatus::Processed | ContentStatus::Failed)) {
        return Err(format!("inputs not settled: {:?}", inputs.iter().map(|c| c.status).collect::<Vec<_>>()));
    }
    let messages = store.list::<Message>(None, None).map_err(|e| e.to_string())?;
    let mut ids: Vec<&str> = messages.iter().map(|m| m.message_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != messages.len() {
        return Err("duplicate message ids".into());
    }
    Ok(())
}
