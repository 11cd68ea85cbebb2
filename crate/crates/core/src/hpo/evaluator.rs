use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::HpoError;
use crate::backends::{
    unit_hash, BackendError, ContentReport, JobInput, JobOutcome, PollReport, ProcessingDescriptor, WfmBackend,
};
use crate::clock::{secs, Millis};
use crate::model::ParamValue;

/// Loss of a point; lower is better.
pub type Objective = Arc<dyn Fn(&BTreeMap<String, ParamValue>) -> f64 + Send + Sync>;

fn default_latency() -> (f64, f64) {
    (1.0, 10.0)
}

/// A seeded pool of evaluators. Durations are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEvaluatorConfig {
    pub workers: u32,
    /// Each attempt takes a uniform draw from this range.
    #[serde(default = "default_latency")]
    pub latency: (f64, f64),
    /// Chance that an attempt never reports.
    #[serde(default)]
    pub loss_rate: f64,
    /// Drives latencies, and so the order losses arrive in.
    #[serde(default)]
    pub order_seed: u64,
    #[serde(default)]
    pub loss_seed: u64,
}

impl SimEvaluatorConfig {
    pub fn new(workers: u32) -> Self {
        Self {
            workers,
            latency: default_latency(),
            loss_rate: 0.0,
            order_seed: 0,
            loss_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be positive".into());
        }
        let (lo, hi) = self.latency;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err("latency must be a range 0 <= lo <= hi".into());
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err("loss_rate outside [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Queued,
    Dispatched,
    Evaluated(f64),
    Lost,
}

#[derive(Debug)]
struct HubPoint {
    proc: usize,
    values: BTreeMap<String, ParamValue>,
    attempts: u32,
    slot: Slot,
    started_at: Option<Millis>,
    finished_at: Option<Millis>,
}

#[derive(Debug, Default)]
struct HubProc {
    external_id: String,
    /// Name of the HPO task, the dataset name of the round.
    task: String,
    total: usize,
    finished: usize,
    changes: Vec<String>,
    killed: bool,
}

/// A point handed to an evaluator. `point_id` is the point's content id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTicket {
    pub point_id: String,
    pub values: BTreeMap<String, ParamValue>,
    pub attempt: u32,
}

/// WFM backend for HPO rounds. Released points wait in a FIFO queue;
/// evaluators fetch them and report losses. With a simulated pool attached
/// the hub also runs the evaluators itself on the caller's clock.
pub struct EvaluatorHub {
    procs: Vec<HubProc>,
    by_external: HashMap<String, usize>,
    by_processing: HashMap<String, usize>,
    points: BTreeMap<String, HubPoint>,
    queue: VecDeque<String>,
    sim: Option<(SimEvaluatorConfig, Objective)>,
    running: BinaryHeap<Reverse<(Millis, String)>>,
    max_retries: u32,
    dispatch_timeout: Option<Millis>,
    now: Millis,
}

impl std::fmt::Debug for EvaluatorHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvaluatorHub")
            .field("points", &self.points.len())
            .field("queued", &self.queue.len())
            .field("simulated", &self.sim.is_some())
            .finish()
    }
}

impl Default for EvaluatorHub {
    fn default() -> Self {
        Self::new()
    }
}

impl EvaluatorHub {
    /// Remote evaluators only.
    pub fn new() -> Self {
        Self {
            procs: Vec::new(),
            by_external: HashMap::new(),
            by_processing: HashMap::new(),
            points: BTreeMap::new(),
            queue: VecDeque::new(),
            sim: None,
            running: BinaryHeap::new(),
            max_retries: 3,
            dispatch_timeout: None,
            now: 0,
        }
    }

    pub fn simulated(config: SimEvaluatorConfig, objective: Objective) -> Result<Self, String> {
        config.validate()?;
        let mut hub = Self::new();
        hub.sim = Some((config, objective));
        Ok(hub)
    }

    /// Attempts after the first before a point is lost for good.
    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    /// A remote evaluator silent this long after a fetch is presumed dead
    /// and its point counts as a failed attempt.
    pub fn with_dispatch_timeout(mut self, timeout: Millis) -> Self {
        self.dispatch_timeout = Some(timeout);
        self
    }

    fn touch(&mut self, id: &str) {
        let p = &self.points[id];
        self.procs[p.proc].changes.push(id.to_string());
    }

    fn settle(&mut self, id: &str, slot: Slot, t: Millis) {
        let p = self.points.get_mut(id).expect("known point");
        p.slot = slot;
        p.finished_at = Some(t);
        let proc = p.proc;
        self.procs[proc].finished += 1;
        self.touch(id);
    }

    /// Queued points of `task`, oldest first, marked dispatched.
    pub fn fetch_points(&mut self, task: &str, limit: usize, now: Millis) -> Vec<PointTicket> {
        self.advance(now);
        let mut out = Vec::new();
        let mut keep = VecDeque::new();
        while let Some(id) = self.queue.pop_front() {
            let p = &self.points[&id];
            let proc = &self.procs[p.proc];
            if out.len() < limit && proc.task == task && !proc.killed {
                out.push(self.dispatch_one(&id, now));
            } else {
                keep.push_back(id);
            }
        }
        self.queue = keep;
        out
    }

    fn dispatch_one(&mut self, id: &str, now: Millis) -> PointTicket {
        let p = self.points.get_mut(id).expect("known point");
        p.slot = Slot::Dispatched;
        p.started_at = Some(now);
        PointTicket {
            point_id: id.to_string(),
            values: p.values.clone(),
            attempt: p.attempts,
        }
    }

    /// Records a loss. Repeating an equal report is a no-op.
    pub fn report_loss(&mut self, point_id: &str, loss: f64, now: Millis) -> Result<(), HpoError> {
        if !loss.is_finite() {
            return Err(HpoError::InvalidLoss(loss));
        }
        self.advance(now);
        let slot = self
            .points
            .get(point_id)
            .ok_or_else(|| HpoError::UnknownPoint(point_id.into()))?
            .slot;
        match slot {
            Slot::Evaluated(l) if l == loss => Ok(()),
            Slot::Evaluated(_) => Err(HpoError::ConflictingLoss(point_id.into())),
            Slot::Dispatched => {
                self.settle(point_id, Slot::Evaluated(loss), now);
                Ok(())
            }
            Slot::Queued | Slot::Lost => Err(HpoError::NotDispatched(point_id.into())),
        }
    }

    /// An evaluator gave up on a dispatched point: it is queued again, or
    /// lost once its retries are spent.
    pub fn report_failure(&mut self, point_id: &str, now: Millis) -> Result<(), HpoError> {
        self.advance(now);
        let p = self
            .points
            .get(point_id)
            .ok_or_else(|| HpoError::UnknownPoint(point_id.into()))?;
        if p.slot != Slot::Dispatched {
            return Err(HpoError::NotDispatched(point_id.into()));
        }
        self.fail_attempt(point_id, now);
        Ok(())
    }

    fn fail_attempt(&mut self, id: &str, t: Millis) {
        let p = self.points.get_mut(id).expect("known point");
        if p.attempts > self.max_retries {
            self.settle(id, Slot::Lost, t);
        } else {
            p.attempts += 1;
            p.slot = Slot::Queued;
            self.queue.push_back(id.to_string());
            self.touch(id);
        }
    }

    /// Simulated evaluators pick up queued points while any is idle.
    fn run_sim(&mut self, t: Millis) {
        let Some((cfg, _)) = &self.sim else {
            return;
        };
        let (workers, (lo, hi), seed) = (cfg.workers as usize, cfg.latency, cfg.order_seed);
        while self.running.len() < workers {
            let Some(id) = self.queue.pop_front() else {
                break;
            };
            if self.procs[self.points[&id].proc].killed {
                continue;
            }
            let ticket = self.dispatch_one(&id, t);
            let u = unit_hash(seed, &[&id, &ticket.attempt.to_string()]);
            let done = t + secs(lo + (hi - lo) * u);
            self.running.push(Reverse((done, id)));
        }
    }

    fn advance(&mut self, now: Millis) {
        while let Some(Reverse((t, _))) = self.running.peek() {
            if *t > now {
                break;
            }
            let Reverse((t, id)) = self.running.pop().expect("peeked");
            self.now = t;
            let (cfg, objective) = self.sim.as_ref().expect("only simulated points run");
            let attempt = self.points[&id].attempts.to_string();
            let lost = unit_hash(cfg.loss_seed, &[&id, &attempt, "lost"]) < cfg.loss_rate;
            let killed = self.procs[self.points[&id].proc].killed;
            if killed || self.points[&id].slot != Slot::Dispatched {
                // Killed processing or a remote report got there first.
            } else if lost {
                self.fail_attempt(&id, t);
            } else {
                let loss = objective(&self.points[&id].values);
                self.settle(&id, Slot::Evaluated(loss), t);
            }
            self.run_sim(t);
        }
        self.now = self.now.max(now);
        if let (None, Some(timeout)) = (&self.sim, self.dispatch_timeout) {
            let expired: Vec<(Millis, String)> = self
                .points
                .iter()
                .filter(|(_, p)| p.slot == Slot::Dispatched)
                .filter_map(|(id, p)| {
                    let due = p.started_at? + timeout;
                    (due <= now).then(|| (due, id.clone()))
                })
                .collect();
            for (due, id) in expired {
                self.fail_attempt(&id, due);
            }
        }
        self.run_sim(self.now);
    }

    fn proc_index(&self, external_id: &str) -> Result<usize, BackendError> {
        self.by_external
            .get(external_id)
            .copied()
            .ok_or_else(|| BackendError::UnknownHandle(external_id.to_string()))
    }

    fn report(&self, id: &str) -> ContentReport {
        let p = &self.points[id];
        let (outcome, metrics) = match p.slot {
            Slot::Evaluated(l) => (JobOutcome::Processed, BTreeMap::from([("loss".to_string(), l)])),
            Slot::Lost => (JobOutcome::Abandoned, BTreeMap::new()),
            _ => (JobOutcome::Pending, BTreeMap::new()),
        };
        ContentReport {
            content_id: id.to_string(),
            attempts: p.attempts,
            outcome,
            started_at: p.started_at,
            finished_at: p.finished_at,
            metrics,
        }
    }
}

fn point_values(input: &JobInput) -> Result<BTreeMap<String, ParamValue>, BackendError> {
    input
        .payload
        .as_ref()
        .and_then(|p| p.get("values"))
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| BackendError::Rejected(format!("`{}` carries no point values", input.content_id)))
}

impl WfmBackend for EvaluatorHub {
    fn submit(&mut self, desc: &ProcessingDescriptor, now: Millis) -> Result<String, BackendError> {
        self.advance(now);
        if let Some(&i) = self.by_processing.get(&desc.processing_id) {
            return Ok(self.procs[i].external_id.clone());
        }
        let external_id = format!("hpo-{}", self.procs.len() + 1);
        self.by_processing.insert(desc.processing_id.clone(), self.procs.len());
        self.by_external.insert(external_id.clone(), self.procs.len());
        self.procs.push(HubProc {
            external_id: external_id.clone(),
            task: desc.input_name.clone(),
            total: desc.total_inputs,
            ..Default::default()
        });
        Ok(external_id)
    }

    fn release(&mut self, external_id: &str, bundles: &[Vec<JobInput>], now: Millis) -> Result<(), BackendError> {
        let proc = self.proc_index(external_id)?;
        self.advance(now);
        if self.procs[proc].killed {
            return Err(BackendError::Rejected(format!("{external_id} was killed")));
        }
        for input in bundles.iter().flatten() {
            if self.points.contains_key(&input.content_id) {
                continue;
            }
            let values = point_values(input)?;
            self.points.insert(
                input.content_id.clone(),
                HubPoint {
                    proc,
                    values,
                    attempts: 1,
                    slot: Slot::Queued,
                    started_at: None,
                    finished_at: None,
                },
            );
            self.queue.push_back(input.content_id.clone());
            self.touch(&input.content_id);
        }
        self.run_sim(now);
        Ok(())
    }

    fn poll(&mut self, external_id: &str, since: u64, now: Millis) -> Result<PollReport, BackendError> {
        let proc = self.proc_index(external_id)?;
        self.advance(now);
        let p = &self.procs[proc];
        let start = (since as usize).min(p.changes.len());
        let mut seen = std::collections::BTreeSet::new();
        let entries = p.changes[start..]
            .iter()
            .filter(|id| seen.insert(id.as_str()))
            .map(|id| self.report(id))
            .collect();
        Ok(PollReport {
            entries,
            cursor: p.changes.len() as u64,
            terminal: p.killed || (p.total > 0 && p.finished >= p.total),
            metrics: BTreeMap::new(),
        })
    }

    fn kill(&mut self, external_id: &str, now: Millis) -> Result<(), BackendError> {
        let proc = self.proc_index(external_id)?;
        self.advance(now);
        self.procs[proc].killed = true;
        Ok(())
    }

    fn next_event_time(&self, _now: Millis) -> Option<Millis> {
        self.running.peek().map(|Reverse((t, _))| *t)
    }
}
