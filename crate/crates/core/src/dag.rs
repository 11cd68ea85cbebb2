//! Large job DAGs and the processing/decision loop.
//!
//! A job graph is layered by longest-path depth. Each layer becomes one
//! Work over an inline listing of its jobs, and each job carries the data
//! identifiers of its dependencies, so the Transformer releases it the
//! moment those are processed. Layer `k + 1` is instantiated when layer `k`
//! is activated, not when it terminates, so no job waits for the rest of
//! its predecessor layer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CmpOp, CollectionSpec, ConditionBranch, Destination, FileSpec, ParamExpr, ParamSlot, ParamType, ParamValue,
    PredicateExpr, WorkKind, WorkTemplate, Workflow,
};

pub const DAG_SCOPE: &str = "dag";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("job graph does not parse: {0}")]
    Parse(String),
    #[error("job graph has no jobs")]
    Empty,
    #[error("invalid job id `{0}`")]
    InvalidJobId(String),
    #[error("job `{0}` declared twice")]
    DuplicateJob(String),
    #[error("job `{job}` depends on unknown job `{dependency}`")]
    DanglingDependency { job: String, dependency: String },
    /// Carries one cycle, first job repeated at the end.
    #[error("job graph has a cycle: {}", .0.join(" -> "))]
    CyclicJobGraph(Vec<String>),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

fn graph_version() -> u32 {
    GRAPH_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
}

impl Job {
    pub fn new(id: &str, depends_on: &[&str]) -> Self {
        Self {
            id: id.into(),
            payload: None,
            depends_on: depends_on.iter().map(|d| d.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobGraph {
    #[serde(default = "graph_version")]
    pub version: u32,
    pub jobs: Vec<Job>,
}

impl JobGraph {
    pub fn new(jobs: Vec<Job>) -> Self {
        Self {
            version: GRAPH_VERSION,
            jobs,
        }
    }

    pub fn parse(text: &str) -> Result<Self, DagError> {
        let g: JobGraph = serde_json::from_str(text).map_err(|e| DagError::Parse(e.to_string()))?;
        if g.version != GRAPH_VERSION {
            return Err(DagError::Parse(format!(
                "unsupported version {}, expected {GRAPH_VERSION}",
                g.version
            )));
        }
        Ok(g)
    }

    pub fn render(&self) -> String {
        serde_json::to_string(self).expect("job graph serializes")
    }

    /// Longest-path depth of every job, in file order. Depth 0 jobs have no
    /// dependencies.
    pub fn depths(&self) -> Result<Vec<u32>, DagError> {
        if self.jobs.is_empty() {
            return Err(DagError::Empty);
        }
        let mut index = HashMap::with_capacity(self.jobs.len());
        for (i, j) in self.jobs.iter().enumerate() {
            // `/` separates the file part of a data identifier and `%{`
            // would be read as a placeholder.
            if j.id.is_empty() || j.id.contains('/') || j.id.contains("%{") || j.id.trim() != j.id {
                return Err(DagError::InvalidJobId(j.id.clone()));
            }
            if index.insert(j.id.as_str(), i).is_some() {
                return Err(DagError::DuplicateJob(j.id.clone()));
            }
        }
        let mut deps: Vec<BTreeSet<usize>> = Vec::with_capacity(self.jobs.len());
        for j in &self.jobs {
            let mut set = BTreeSet::new();
            for d in &j.depends_on {
                let Some(&k) = index.get(d.as_str()) else {
                    return Err(DagError::DanglingDependency {
                        job: j.id.clone(),
                        dependency: d.clone(),
                    });
                };
                set.insert(k);
            }
            deps.push(set);
        }

        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); self.jobs.len()];
        for (i, ds) in deps.iter().enumerate() {
            for &d in ds {
                dependents[d].push(i);
            }
        }
        let mut pending: Vec<usize> = deps.iter().map(BTreeSet::len).collect();
        let mut depth = vec![0u32; self.jobs.len()];
        let mut ready: Vec<usize> = (0..self.jobs.len()).filter(|&i| pending[i] == 0).collect();
        let mut done = 0;
        while let Some(i) = ready.pop() {
            done += 1;
            for &k in &dependents[i] {
                depth[k] = depth[k].max(depth[i] + 1);
                pending[k] -= 1;
                if pending[k] == 0 {
                    ready.push(k);
                }
            }
        }
        if done < self.jobs.len() {
            return Err(DagError::CyclicJobGraph(self.find_cycle(&deps, &pending)));
        }
        Ok(depth)
    }

    /// Every job left with pending dependencies has one among the others
    /// left, so following those must close a loop.
    fn find_cycle(&self, deps: &[BTreeSet<usize>], pending: &[usize]) -> Vec<String> {
        let start = pending.iter().position(|&p| p > 0).expect("a job is left");
        let mut seen = HashMap::new();
        let mut path = Vec::new();
        let mut at = start;
        while !seen.contains_key(&at) {
            seen.insert(at, path.len());
            path.push(at);
            at = *deps[at]
                .iter()
                .find(|&&d| pending[d] > 0)
                .expect("a stuck job has a stuck dependency");
        }
        // `path` walks dependency edges; report it in execution order.
        let mut cycle: Vec<String> = path[seen[&at]..].iter().map(|&i| self.jobs[i].id.clone()).collect();
        cycle.reverse();
        cycle.push(cycle[0].clone());
        cycle
    }

    /// Job indices per layer, each layer in file order.
    pub fn layers(&self) -> Result<Vec<Vec<usize>>, DagError> {
        let depth = self.depths()?;
        let n = depth.iter().max().map_or(0, |d| *d as usize + 1);
        let mut out = vec![Vec::new(); n];
        for (i, d) in depth.iter().enumerate() {
            out[*d as usize].push(i);
        }
        Ok(out)
    }
}

pub fn layer_template(k: usize) -> String {
    format!("layer{k:03}")
}

/// Dataset name of layer `k` of `graph_name`.
pub fn layer_dataset(graph_name: &str, k: usize) -> String {
    format!("{graph_name}.{}", layer_template(k))
}

/// Maps the graph onto one Work per layer, chained by always-true branches
/// that fire on activation.
pub fn ingest_job_graph(graph: &JobGraph, graph_name: &str) -> Result<Workflow, DagError> {
    if graph_name.is_empty() || graph_name.contains('/') || graph_name.contains("%{") {
        return Err(DagError::InvalidSpec(format!("graph name `{graph_name}`")));
    }
    let layers = graph.layers()?;
    let mut layer_of = HashMap::with_capacity(graph.jobs.len());
    for (k, layer) in layers.iter().enumerate() {
        for &i in layer {
            layer_of.insert(graph.jobs[i].id.as_str(), k);
        }
    }
    let mut wf = Workflow::new(graph_name);
    for (k, layer) in layers.iter().enumerate() {
        let files = layer
            .iter()
            .map(|&i| {
                let j = &graph.jobs[i];
                let mut depends_on: Vec<String> = j
                    .depends_on
                    .iter()
                    .map(|d| CollectionSpec::did(DAG_SCOPE, &layer_dataset(graph_name, layer_of[d.as_str()]), d))
                    .collect();
                depends_on.sort();
                depends_on.dedup();
                FileSpec {
                    name: j.id.clone(),
                    size_bytes: 0,
                    depends_on,
                    payload: j.payload.clone(),
                }
            })
            .collect();
        let input = CollectionSpec::inline(DAG_SCOPE, &layer_dataset(graph_name, k), files);
        let mut tpl = WorkTemplate::processing(&layer_template(k), input);
        tpl.is_entry = k == 0;
        tpl.max_instantiations = 1;
        wf.templates.push(tpl);
        if k > 0 {
            wf.conditions.push(
                ConditionBranch::new(&layer_template(k - 1), PredicateExpr::always(), &[&layer_template(k)])
                    .on_activation(),
            );
        }
    }
    wf.max_total_works = layers.len() as u32;
    Ok(wf)
}

/// A seeded random DAG with exactly `max_depth` layers: every job past
/// layer 0 depends on at least one job of the layer just below it.
pub fn random_job_graph(seed: u64, jobs: usize, max_depth: usize, max_deps: usize) -> JobGraph {
    assert!(max_depth >= 1 && jobs >= max_depth && max_deps >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level: Vec<usize> = (0..max_depth).collect();
    level.extend((max_depth..jobs).map(|_| rng.gen_range(0..max_depth)));
    level.sort_unstable();
    let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); max_depth];
    for (i, &l) in level.iter().enumerate() {
        by_level[l].push(i);
    }
    let id = |i: usize| format!("j{i:06}");
    let mut out: Vec<Job> = Vec::with_capacity(jobs);
    for (i, &l) in level.iter().enumerate() {
        let mut deps = BTreeSet::new();
        if l > 0 {
            deps.insert(*by_level[l - 1].choose(&mut rng).expect("layers are non-empty"));
            let below = by_level[..l].iter().map(Vec::len).sum::<usize>();
            for _ in 1..rng.gen_range(1..=max_deps) {
                // Indices are sorted by level, so 0..below is every lower job.
                deps.insert(rng.gen_range(0..below));
            }
        }
        out.push(Job {
            id: id(i),
            payload: None,
            depends_on: deps.into_iter().map(id).collect(),
        });
    }
    out.shuffle(&mut rng);
    JobGraph::new(out)
}

// ---- processing/decision loop ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveLearningSpec {
    pub processing_template: String,
    pub decision_template: String,
    /// The decision Work continues the loop by reporting this metric as 1.
    pub continue_metric: String,
    pub max_loops: u32,
    /// Decision metrics handed to the next processing Work as float
    /// bindings of the same name (0.0 for the first one). The decision
    /// must report all of them whenever it continues.
    #[serde(default)]
    pub hint_metrics: Vec<String>,
    pub input: CollectionSpec,
    #[serde(default)]
    pub processing_executable: String,
    #[serde(default)]
    pub decision_executable: String,
}

impl ActiveLearningSpec {
    pub fn new(input: CollectionSpec, max_loops: u32) -> Self {
        Self {
            processing_template: "process".into(),
            decision_template: "decide".into(),
            continue_metric: "continue".into(),
            max_loops,
            hint_metrics: Vec::new(),
            input,
            processing_executable: String::new(),
            decision_executable: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DagError> {
        let bad = |m: &str| Err(DagError::InvalidSpec(m.into()));
        if self.max_loops == 0 {
            return bad("max_loops must be positive");
        }
        if self.processing_template.is_empty() || self.decision_template.is_empty() {
            return bad("template names must be non-empty");
        }
        if self.processing_template == self.decision_template {
            return bad("processing and decision templates must differ");
        }
        if self.continue_metric.is_empty() {
            return bad("continue_metric must be non-empty");
        }
        let mut seen = BTreeSet::new();
        if self.hint_metrics.iter().any(|h| h.is_empty() || !seen.insert(h)) {
            return bad("hint metrics must be distinct and non-empty");
        }
        Ok(())
    }
}

/// P -(always)-> D -(continue_metric == 1)-> P, each capped at `max_loops`
/// instantiations.
pub fn build_active_learning(spec: &ActiveLearningSpec) -> Result<Workflow, DagError> {
    spec.validate()?;
    let mut p = WorkTemplate::processing(&spec.processing_template, spec.input.clone());
    p.is_entry = true;
    p.max_instantiations = spec.max_loops;
    p.executable_spec = spec.processing_executable.clone();
    p.parameters = spec
        .hint_metrics
        .iter()
        .map(|h| ParamSlot::new(h, ParamType::Float).with_default(0.0))
        .collect();

    // The decision reads what the processing Work produced.
    let mut d = WorkTemplate::processing(&spec.decision_template, p.output_spec.clone());
    d.work_kind = WorkKind::DecisionMaking;
    d.max_instantiations = spec.max_loops;
    d.executable_spec = spec.decision_executable.clone();

    let mut wf = Workflow::new(&format!("active-learning-{}", spec.processing_template));
    wf.max_total_works = spec.max_loops.saturating_mul(2);
    wf.conditions.push(ConditionBranch::new(
        &p.name,
        PredicateExpr::always(),
        &[&d.name],
    ));
    let mut back = ConditionBranch::new(
        &d.name,
        PredicateExpr::metric(&spec.continue_metric, CmpOp::Eq, ParamValue::Int(1)),
        &[],
    );
    back.destinations.push(Destination {
        template: p.name.clone(),
        param_map: spec
            .hint_metrics
            .iter()
            .map(|h| (h.clone(), ParamExpr::Metric(h.clone())))
            .collect::<BTreeMap<_, _>>(),
    });
    wf.conditions.push(back);
    wf.templates.extend([p, d]);
    Ok(wf)
}
