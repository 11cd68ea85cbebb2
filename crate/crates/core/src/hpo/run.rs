use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{EvaluatorHub, HpoError, HpoPointSource, HpoTaskSpec, PointStatus, TrialPoint, HPO_SCOPE};
use crate::backends::SharedDdm;
use crate::clock::VirtualClock;
use crate::model::{CmpOp, CollectionSpec, ConditionBranch, ParamValue, PredicateExpr, Workflow, WorkTemplate};
use crate::pipeline::{submit, Backends, DaemonConfig, MemoryTransport, Pipeline};
use crate::store::{Collection, CollectionKind, Content, ContentStatus, Request, RequestStatus, Store, StoreResult};

pub const ROUND_TEMPLATE: &str = "round";

/// One looping template: each instance is a round of points, and a round
/// that produced any points spawns the next.
pub fn hpo_workflow(task_name: &str, task: &HpoTaskSpec) -> Result<Workflow, HpoError> {
    task.validate()?;
    let exe = serde_json::to_string(task).expect("task serializes");
    if exe.contains("%{") {
        return Err(HpoError::InvalidTask("task text may not contain `%{`".into()));
    }
    let mut tpl = WorkTemplate::processing(ROUND_TEMPLATE, CollectionSpec::new(HPO_SCOPE, task_name));
    tpl.is_entry = true;
    tpl.executable_spec = exe;
    tpl.max_instantiations = task.max_rounds();
    let mut wf = Workflow::new(&format!("hpo-{task_name}"));
    wf.templates.push(tpl);
    wf.conditions.push(ConditionBranch::new(
        ROUND_TEMPLATE,
        PredicateExpr::metric("n_inputs", CmpOp::Gt, ParamValue::Int(0)),
        &[ROUND_TEMPLATE],
    ));
    wf.max_total_works = task.max_rounds() + 1;
    Ok(wf)
}

fn trial(c: &Content) -> TrialPoint {
    let payload = c.payload.as_ref();
    let values = payload
        .and_then(|p| p.get("values"))
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let iteration = payload
        .and_then(|p| p.get("iteration"))
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    let loss = c.metrics.get("loss").copied();
    let status = match c.status {
        ContentStatus::New | ContentStatus::Available => PointStatus::Generated,
        ContentStatus::Processed if loss.is_some() => PointStatus::Evaluated,
        ContentStatus::Processed => PointStatus::Lost,
        ContentStatus::Failed if c.abandoned => PointStatus::Lost,
        _ => PointStatus::Dispatched,
    };
    TrialPoint {
        point_id: c.name.clone(),
        values,
        status,
        loss: loss.filter(|_| status == PointStatus::Evaluated),
        iteration,
    }
}

/// Every point of `task_name` in a request, in generation order, skipping
/// the round of `exclude_work`.
pub fn read_trials(store: &Store, request_id: &str, task_name: &str, exclude_work: Option<&str>) -> StoreResult<Vec<TrialPoint>> {
    let key = format!("dataset:{request_id}:{HPO_SCOPE}:{task_name}:{:?}", CollectionKind::Input);
    let mut out = Vec::new();
    for coll in store.list_by::<Collection>(&key)? {
        if Some(coll.work_id.as_str()) == exclude_work {
            continue;
        }
        for c in store.list::<Content>(None, Some(&coll.collection_id))? {
            out.push(trial(&c));
        }
    }
    out.sort_by(|a, b| (a.iteration, &a.point_id).cmp(&(b.iteration, &b.point_id)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoResult {
    pub best_point: Option<TrialPoint>,
    pub best_loss: Option<f64>,
    /// Best loss so far after each evaluated point, in generation order.
    pub trace: Vec<f64>,
    pub points: Vec<TrialPoint>,
    pub request_status: RequestStatus,
}

impl HpoResult {
    pub fn from_trials(points: Vec<TrialPoint>, request_status: RequestStatus) -> Self {
        let mut best: Option<&TrialPoint> = None;
        let mut trace = Vec::new();
        for p in &points {
            if let Some(l) = p.evaluated() {
                if best.and_then(TrialPoint::evaluated).is_none_or(|b| l < b) {
                    best = Some(p);
                }
                trace.push(best.and_then(TrialPoint::evaluated).expect("best is evaluated"));
            }
        }
        Self {
            best_loss: best.and_then(TrialPoint::evaluated),
            best_point: best.cloned(),
            trace,
            request_status,
            points,
        }
    }

    pub fn evaluations(&self) -> usize {
        self.trace.len()
    }
}

/// Runs `task` to completion on virtual time with `hub` as the evaluator.
pub fn run_hpo(task: &HpoTaskSpec, hub: EvaluatorHub) -> Result<HpoResult, HpoError> {
    const TASK: &str = "task";
    let wf = hpo_workflow(TASK, task)?;
    let clock = VirtualClock::new(0);
    let store = Store::in_memory(Arc::new(clock.clone()));
    let pipeline_err = |e: crate::pipeline::PipelineError| HpoError::Pipeline(e.to_string());
    let req = submit(&store, &wf, "hpo", "hpo").map_err(|e| pipeline_err(e.into()))?;
    let ddm: SharedDdm = Arc::new(Mutex::new(HpoPointSource::new(store.clone())));
    let backends = Backends {
        ddm,
        wfm: Arc::new(Mutex::new(hub)),
    };
    let mut pipeline = Pipeline::new(
        store.clone(),
        backends,
        Arc::new(MemoryTransport::auto_ack()),
        DaemonConfig::new("hpo"),
    );
    pipeline.run_virtual(&clock, 1_000_000).map_err(pipeline_err)?;
    let status = store
        .get::<Request>(&req.request_id)
        .map_err(|e| pipeline_err(e.into()))?
        .status;
    let points = read_trials(&store, &req.request_id, TASK, None).map_err(|e| pipeline_err(e.into()))?;
    Ok(HpoResult::from_trials(points, status))
}
