//! Discrete-event compute model: a FIFO pool of workers behind a broker
//! that waits for input, times jobs out and resubmits failed attempts.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    unit_hash, BackendError, ContentReport, JobInput, JobOutcome, PollReport, ProcessingDescriptor,
    SharedDdm, WfmBackend,
};
use crate::clock::{secs, Millis};

fn default_resubmit_delay() -> f64 {
    1.0
}

fn default_max_attempts() -> u32 {
    8
}

/// Durations are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSimConfig {
    pub workers: u32,
    pub per_file_processing_time: f64,
    /// A job whose input is not on disk strictly before this long after
    /// the attempt starts fails. `None` waits forever.
    #[serde(default)]
    pub input_wait_timeout: Option<f64>,
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Pause between a failed attempt and its resubmission.
    #[serde(default = "default_resubmit_delay")]
    pub resubmit_delay: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
}

impl ComputeSimConfig {
    pub fn new(workers: u32, per_file_processing_time: f64) -> Self {
        Self {
            workers,
            per_file_processing_time,
            input_wait_timeout: None,
            failure_rate: 0.0,
            seed: 0,
            resubmit_delay: default_resubmit_delay(),
            max_attempts: default_max_attempts(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be positive".into());
        }
        if !(self.per_file_processing_time.is_finite() && self.per_file_processing_time >= 0.0) {
            return Err("per_file_processing_time must be a non-negative number".into());
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(format!("failure_rate {} outside [0, 1]", self.failure_rate));
        }
        if let Some(t) = self.input_wait_timeout {
            if !(t.is_finite() && t > 0.0) {
                return Err("input_wait_timeout must be positive".into());
            }
        }
        if !(self.resubmit_delay.is_finite() && self.resubmit_delay >= 0.0) {
            return Err("resubmit_delay must be non-negative".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    /// A new attempt reaches the broker.
    Attempt(usize),
    /// Input landed; the job joins the worker queue.
    Ready(usize),
    /// Input did not land in time.
    Timeout(usize),
    Done(usize),
}

#[derive(Debug)]
struct Job {
    proc: usize,
    inputs: Vec<JobInput>,
    attempt: u32,
    started_at: Option<Millis>,
}

#[derive(Debug, Default)]
struct Proc {
    external_id: String,
    contents: BTreeMap<String, ContentReport>,
    /// Change log of content ids; a poll cursor indexes it.
    changes: Vec<String>,
    total_inputs: usize,
    finished: usize,
    killed: bool,
}

impl Proc {
    fn update(&mut self, id: &str, f: impl FnOnce(&mut ContentReport)) {
        let r = self
            .contents
            .entry(id.to_string())
            .or_insert_with(|| ContentReport {
                content_id: id.to_string(),
                attempts: 0,
                outcome: JobOutcome::Pending,
                started_at: None,
                finished_at: None,
                metrics: BTreeMap::new(),
            });
        let was_final = r.outcome != JobOutcome::Pending;
        f(r);
        if !was_final && r.outcome != JobOutcome::Pending {
            self.finished += 1;
        }
        self.changes.push(id.to_string());
    }

    fn terminal(&self) -> bool {
        self.killed || (self.total_inputs > 0 && self.finished >= self.total_inputs)
    }
}

/// Seeded, deterministic batch compute farm.
pub struct ComputeSim {
    config: ComputeSimConfig,
    input: Option<SharedDdm>,
    procs: Vec<Proc>,
    by_external: HashMap<String, usize>,
    by_processing: HashMap<String, usize>,
    jobs: Vec<Job>,
    events: BinaryHeap<Reverse<(Millis, u64, Ev)>>,
    /// Worker queue ordered by (enqueue time, first content id).
    queue: BTreeSet<(Millis, String, usize)>,
    idle: u32,
    seq: u64,
    now: Millis,
}

impl std::fmt::Debug for ComputeSim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComputeSim")
            .field("config", &self.config)
            .field("jobs", &self.jobs.len())
            .field("now", &self.now)
            .finish()
    }
}

impl ComputeSim {
    /// `input` answers when a job's files reach disk; without it every
    /// input is ready at once.
    pub fn new(config: ComputeSimConfig, input: Option<SharedDdm>) -> Result<Self, String> {
        config.validate()?;
        Ok(Self {
            idle: config.workers,
            config,
            input,
            procs: Vec::new(),
            by_external: HashMap::new(),
            by_processing: HashMap::new(),
            jobs: Vec::new(),
            events: BinaryHeap::new(),
            queue: BTreeSet::new(),
            seq: 0,
            now: 0,
        })
    }

    pub fn config(&self) -> &ComputeSimConfig {
        &self.config
    }

    fn push(&mut self, at: Millis, ev: Ev) {
        self.seq += 1;
        self.events.push(Reverse((at, self.seq, ev)));
    }

    fn ready_at(&self, job: usize) -> Option<Millis> {
        let Some(ddm) = &self.input else {
            return Some(0);
        };
        let ddm = ddm.lock();
        let mut latest = 0;
        for i in &self.jobs[job].inputs {
            latest = latest.max(ddm.ready_at(&i.did)?);
        }
        Some(latest)
    }

    fn start_attempt(&mut self, job: usize, t: Millis) {
        let attempt = self.jobs[job].attempt;
        let proc = self.jobs[job].proc;
        let ids: Vec<String> = self.jobs[job].inputs.iter().map(|i| i.content_id.clone()).collect();
        for id in &ids {
            self.procs[proc].update(id, |r| r.attempts = attempt);
        }
        let ready = self.ready_at(job);
        let deadline = self.config.input_wait_timeout.map(|s| t + secs(s));
        match (ready, deadline) {
            (Some(r), _) if r <= t => self.enqueue(job, t),
            (Some(r), Some(d)) if r < d => self.push(r, Ev::Ready(job)),
            (Some(r), None) => self.push(r, Ev::Ready(job)),
            (_, Some(d)) => self.push(d, Ev::Timeout(job)),
            (None, None) => {}
        }
    }

    fn enqueue(&mut self, job: usize, t: Millis) {
        let key = self.jobs[job].inputs[0].content_id.clone();
        self.queue.insert((t, key, job));
    }

    fn dispatch(&mut self, t: Millis) {
        while self.idle > 0 {
            let Some(head) = self.queue.pop_first() else {
                break;
            };
            let job = head.2;
            if self.procs[self.jobs[job].proc].killed {
                continue;
            }
            self.idle -= 1;
            self.jobs[job].started_at = Some(t);
            let n = self.jobs[job].inputs.len() as f64;
            let dur = secs(self.config.per_file_processing_time * n);
            self.push(t + dur, Ev::Done(job));
        }
    }

    fn fail(&mut self, job: usize, t: Millis) {
        let proc = self.jobs[job].proc;
        if self.procs[proc].killed {
            return;
        }
        if self.jobs[job].attempt >= self.config.max_attempts {
            let ids: Vec<String> = self.jobs[job].inputs.iter().map(|i| i.content_id.clone()).collect();
            for id in &ids {
                self.procs[proc].update(id, |r| {
                    r.outcome = JobOutcome::Abandoned;
                    r.finished_at = Some(t);
                });
            }
        } else {
            self.jobs[job].attempt += 1;
            self.push(t + secs(self.config.resubmit_delay), Ev::Attempt(job));
        }
    }

    /// Processes every event up to and including `now`.
    fn advance(&mut self, now: Millis) {
        while let Some(Reverse((t, _, ev))) = self.events.peek().copied() {
            if t > now {
                break;
            }
            self.events.pop();
            self.now = t;
            match ev {
                Ev::Attempt(job) => {
                    if !self.procs[self.jobs[job].proc].killed {
                        self.start_attempt(job, t);
                    }
                }
                Ev::Ready(job) => self.enqueue(job, t),
                Ev::Timeout(job) => self.fail(job, t),
                Ev::Done(job) => {
                    self.idle += 1;
                    self.complete(job, t);
                }
            }
            self.dispatch(t);
        }
        self.now = self.now.max(now);
    }

    fn complete(&mut self, job: usize, t: Millis) {
        let j = &self.jobs[job];
        let first = &j.inputs[0].content_id;
        let draw = unit_hash(self.config.seed, &[first, &j.attempt.to_string()]);
        if draw < self.config.failure_rate {
            self.fail(job, t);
            return;
        }
        let proc = j.proc;
        let started = j.started_at;
        let ids: Vec<String> = j.inputs.iter().map(|i| i.content_id.clone()).collect();
        for id in &ids {
            self.procs[proc].update(id, |r| {
                r.outcome = JobOutcome::Processed;
                r.started_at = started;
                r.finished_at = Some(t);
            });
        }
    }

    fn proc_index(&self, external_id: &str) -> Result<usize, BackendError> {
        self.by_external
            .get(external_id)
            .copied()
            .ok_or_else(|| BackendError::UnknownHandle(external_id.to_string()))
    }
}

impl WfmBackend for ComputeSim {
    fn submit(&mut self, desc: &ProcessingDescriptor, now: Millis) -> Result<String, BackendError> {
        self.advance(now);
        if let Some(&i) = self.by_processing.get(&desc.processing_id) {
            return Ok(self.procs[i].external_id.clone());
        }
        let external_id = format!("cs-{}", self.procs.len() + 1);
        self.by_processing
            .insert(desc.processing_id.clone(), self.procs.len());
        self.by_external
            .insert(external_id.clone(), self.procs.len());
        self.procs.push(Proc {
            external_id: external_id.clone(),
            total_inputs: desc.total_inputs,
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
        for bundle in bundles {
            let fresh: Vec<JobInput> = bundle
                .iter()
                .filter(|i| !self.procs[proc].contents.contains_key(&i.content_id))
                .cloned()
                .collect();
            if fresh.is_empty() {
                continue;
            }
            self.jobs.push(Job {
                proc,
                inputs: fresh,
                attempt: 1,
                started_at: None,
            });
            self.start_attempt(self.jobs.len() - 1, now);
        }
        self.dispatch(now);
        Ok(())
    }

    fn poll(&mut self, external_id: &str, since: u64, now: Millis) -> Result<PollReport, BackendError> {
        let proc = self.proc_index(external_id)?;
        self.advance(now);
        let p = &self.procs[proc];
        let start = (since as usize).min(p.changes.len());
        let mut seen = BTreeSet::new();
        let entries = p.changes[start..]
            .iter()
            .filter(|id| seen.insert(id.as_str()))
            .map(|id| p.contents[id].clone())
            .collect();
        Ok(PollReport {
            entries,
            cursor: p.changes.len() as u64,
            terminal: p.terminal(),
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
        self.events.peek().map(|Reverse((t, _, _))| *t)
    }
}
