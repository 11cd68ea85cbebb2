//! Data carousel: one tape-resident dataset processed under a delivery
//! policy, measured for job attempts and disk footprint.
//!
//! A run drives the full pipeline over a [`TapeSim`] and a compute backend.
//! Attempts and timings come from the stored Contents; disk occupancy comes
//! from the tape's stage and release record.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ClockMode, Scenario, SharedDdm, SharedWfm, TapeSim};
use crate::clock::{secs, Clock, ElapsedClock, Millis, VirtualClock};
use crate::model::{CollectionSpec, ParamSlot, ParamType, ParamValue, Workflow, WorkTemplate};
use crate::pipeline::{
    run_pipeline, submit, Backends, DaemonConfig, MemoryTransport, Pipeline, PipelineError, BUNDLE_SIZE,
    GRANULARITY, PROMPT_RELEASE,
};
use crate::store::{CollectionKind, Content, ContentStatus, Request, RequestStatus, Store, StoreError};

/// Template name of the single carousel Work.
pub const TEMPLATE: &str = "carousel";

/// Generous bound on driver rounds; a 1000-file run needs a few thousand.
const MAX_ROUNDS: u64 = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    DatasetLevel,
    FileLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarouselPolicy {
    pub granularity: Granularity,
    /// Ignored at dataset level: the cache is held to the end of the run.
    pub prompt_release: bool,
    /// Files per released job; file level only.
    pub bundle_size: usize,
}

impl CarouselPolicy {
    pub fn file_level() -> Self {
        Self {
            granularity: Granularity::FileLevel,
            prompt_release: true,
            bundle_size: 1,
        }
    }

    pub fn dataset_level() -> Self {
        Self {
            granularity: Granularity::DatasetLevel,
            prompt_release: false,
            bundle_size: 1,
        }
    }

    pub fn with_bundle_size(mut self, n: usize) -> Self {
        self.bundle_size = n;
        self
    }

    pub fn with_prompt_release(mut self, on: bool) -> Self {
        self.prompt_release = on;
        self
    }

    /// The policy as it actually applies: dataset level drops prompt
    /// release and bundling.
    pub fn effective(self) -> Self {
        match self.granularity {
            Granularity::DatasetLevel => Self::dataset_level(),
            Granularity::FileLevel => self,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bundle_size == 0 {
            return Err("bundle_size must be positive".into());
        }
        Ok(())
    }

    /// Reserved bindings that steer the pipeline's delivery.
    pub fn bindings(&self) -> BTreeMap<String, ParamValue> {
        let p = self.effective();
        let granularity = match p.granularity {
            Granularity::DatasetLevel => "dataset",
            Granularity::FileLevel => "file",
        };
        BTreeMap::from([
            (GRANULARITY.to_string(), ParamValue::Str(granularity.into())),
            (BUNDLE_SIZE.to_string(), ParamValue::Int(p.bundle_size as i64)),
            (PROMPT_RELEASE.to_string(), ParamValue::Bool(p.prompt_release)),
        ])
    }
}

/// `file-level`, `dataset-level`, with optional `:keep` (no prompt
/// release) and `:bundle<N>` suffixes on file level.
impl fmt::Display for CarouselPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.effective();
        match p.granularity {
            Granularity::DatasetLevel => f.write_str("dataset-level"),
            Granularity::FileLevel => {
                f.write_str("file-level")?;
                if p.bundle_size != 1 {
                    write!(f, ":bundle{}", p.bundle_size)?;
                }
                if !p.prompt_release {
                    f.write_str(":keep")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for CarouselPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.split(':');
        let mut p = match parts.next().unwrap_or("") {
            "file-level" => Self::file_level(),
            "dataset-level" => Self::dataset_level(),
            other => return Err(format!("unknown policy `{other}` (file-level, dataset-level)")),
        };
        for part in parts {
            if p.granularity == Granularity::DatasetLevel {
                return Err(format!("`{part}` applies to file-level only"));
            }
            if part == "keep" {
                p.prompt_release = false;
            } else if let Some(n) = part.strip_prefix("bundle") {
                p.bundle_size = n
                    .parse()
                    .map_err(|_| format!("bad bundle size in `{part}`"))?;
            } else {
                return Err(format!("unknown policy option `{part}`"));
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Times are milliseconds from the scenario origin.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarouselMetrics {
    /// attempt count → number of jobs (input contents).
    pub attempts_histogram: BTreeMap<u32, u64>,
    pub peak_disk_bytes: u64,
    pub disk_byte_seconds: u64,
    pub makespan: Millis,
    pub time_to_first_processing: Millis,
}

impl CarouselMetrics {
    pub fn jobs(&self) -> u64 {
        self.attempts_histogram.values().sum()
    }

    /// 0 when there are no jobs.
    pub fn mean_attempts(&self) -> f64 {
        let jobs = self.jobs();
        if jobs == 0 {
            return 0.0;
        }
        let total: u64 = self
            .attempts_histogram
            .iter()
            .map(|(a, n)| *a as u64 * n)
            .sum();
        total as f64 / jobs as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarouselRun {
    pub policy: CarouselPolicy,
    pub metrics: CarouselMetrics,
    pub request_status: RequestStatus,
    /// Occupancy after the changes at each instant.
    pub occupancy: Vec<(Millis, u64)>,
    /// Bytes of every file that reached disk by the end of the run.
    pub bytes_staged: u64,
    pub bytes_processed: u64,
    pub bytes_abandoned: u64,
}

#[derive(Debug, Error)]
pub enum CarouselError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("carousel request ended {0}")]
    Incomplete(RequestStatus),
}

impl From<StoreError> for CarouselError {
    fn from(e: StoreError) -> Self {
        Self::Pipeline(e.into())
    }
}

/// Backends of one run. The tape is concrete because the footprint is read
/// from it afterwards.
#[derive(Clone)]
pub struct CarouselBackends {
    pub tape: Arc<Mutex<TapeSim>>,
    pub wfm: SharedWfm,
}

impl CarouselBackends {
    pub fn from_scenario(s: &Scenario) -> Result<Self, CarouselError> {
        let (tape, compute) = s.build().map_err(CarouselError::Config)?;
        Ok(Self { tape, wfm: compute })
    }

    pub fn pipeline_backends(&self) -> Backends {
        let ddm: SharedDdm = self.tape.clone();
        Backends {
            ddm,
            wfm: self.wfm.clone(),
        }
    }
}

/// One entry template reading `dataset` with the policy's bindings.
pub fn carousel_workflow(dataset: &CollectionSpec, policy: &CarouselPolicy) -> Workflow {
    let mut tpl = WorkTemplate::processing(TEMPLATE, dataset.clone());
    tpl.is_entry = true;
    tpl.max_instantiations = 1;
    for (name, value) in policy.bindings() {
        let ty = match value {
            ParamValue::Bool(_) => ParamType::Bool,
            ParamValue::Int(_) => ParamType::Int,
            ParamValue::Float(_) => ParamType::Float,
            ParamValue::Str(_) => ParamType::String,
        };
        tpl.parameters.push(ParamSlot::new(&name, ty).with_default(value));
    }
    let mut wf = Workflow::new(&format!("carousel-{policy}"));
    wf.templates.push(tpl);
    wf
}

/// Runs `dataset` under `policy` on virtual time until the request settles.
pub fn run_carousel(
    dataset: &CollectionSpec,
    policy: &CarouselPolicy,
    backends: &CarouselBackends,
    clock: &VirtualClock,
) -> Result<CarouselRun, CarouselError> {
    policy.validate().map_err(CarouselError::Config)?;
    let store = Store::in_memory(Arc::new(clock.clone()));
    let req = submit(&store, &carousel_workflow(dataset, policy), "carousel", "carousel")?;
    let transport = Arc::new(MemoryTransport::auto_ack());
    let mut pipeline = Pipeline::new(
        store.clone(),
        backends.pipeline_backends(),
        transport,
        DaemonConfig::new("carousel"),
    );
    pipeline.run_virtual(clock, MAX_ROUNDS)?;
    finish(&store, &req.request_id, policy, &backends.tape.lock())
}

/// Builds fresh backends from the scenario and runs it in the scenario's
/// clock mode. Real-time runs poll every `clock.tick` seconds and give up
/// after `deadline`.
pub fn run_scenario(scenario: &Scenario, policy: &CarouselPolicy, deadline: Duration) -> Result<CarouselRun, CarouselError> {
    scenario.validate().map_err(CarouselError::Config)?;
    let backends = CarouselBackends::from_scenario(scenario)?;
    let dataset = CollectionSpec::new(&scenario.tape.scope, &scenario.tape.dataset);
    match scenario.clock.mode {
        ClockMode::Virtual => run_carousel(&dataset, policy, &backends, &VirtualClock::new(0)),
        ClockMode::Real => run_real_time(&dataset, policy, &backends, secs(scenario.clock.tick).max(1), deadline),
    }
}

fn run_real_time(
    dataset: &CollectionSpec,
    policy: &CarouselPolicy,
    backends: &CarouselBackends,
    tick: Millis,
    deadline: Duration,
) -> Result<CarouselRun, CarouselError> {
    policy.validate().map_err(CarouselError::Config)?;
    let clock: Arc<dyn Clock> = Arc::new(ElapsedClock::new());
    let store = Store::in_memory(clock);
    let req = submit(&store, &carousel_workflow(dataset, policy), "carousel", "carousel")?;
    let mut cfg = DaemonConfig::new("carousel");
    cfg.poll_interval = tick;
    let handle = run_pipeline(
        store.clone(),
        backends.pipeline_backends(),
        Arc::new(MemoryTransport::auto_ack()),
        cfg,
    )?;
    let started = Instant::now();
    while started.elapsed() < deadline {
        if store.get::<Request>(&req.request_id)?.status.is_terminal() {
            break;
        }
        std::thread::sleep(Duration::from_millis(tick.min(50)));
    }
    handle.stop();
    finish(&store, &req.request_id, policy, &backends.tape.lock())
}

fn finish(store: &Store, request_id: &str, policy: &CarouselPolicy, tape: &TapeSim) -> Result<CarouselRun, CarouselError> {
    let status = store.get::<Request>(request_id)?.status;
    if !status.is_terminal() {
        return Err(CarouselError::Incomplete(status));
    }
    Ok(measure(store, tape, policy)?)
}

/// Metrics of a settled run from its store and tape.
pub fn measure(store: &Store, tape: &TapeSim, policy: &CarouselPolicy) -> Result<CarouselRun, StoreError> {
    let inputs: Vec<Content> = store
        .list::<Content>(None, None)?
        .into_iter()
        .filter(|c| c.kind == CollectionKind::Input)
        .collect();
    let mut m = CarouselMetrics::default();
    let (mut processed, mut abandoned) = (0, 0);
    let mut first: Option<Millis> = None;
    for c in &inputs {
        *m.attempts_histogram.entry(c.attempt_count).or_default() += 1;
        match c.status {
            ContentStatus::Processed => processed += c.size_bytes,
            ContentStatus::Failed => abandoned += c.size_bytes,
            _ => {}
        }
        if let Some(t) = c.finished_at {
            m.makespan = m.makespan.max(t);
        }
        if let Some(t) = c.started_at {
            first = Some(first.map_or(t, |f| f.min(t)));
        }
    }
    m.time_to_first_processing = first.unwrap_or(0);
    let fp = tape.footprint(m.makespan);
    m.peak_disk_bytes = fp.peak_bytes;
    m.disk_byte_seconds = fp.byte_seconds;
    let bytes_staged = tape
        .config()
        .files
        .iter()
        .filter(|f| !inputs.is_empty() && tape.staged_at(&f.name).is_some_and(|t| t <= m.makespan))
        .map(|f| f.size_bytes)
        .sum();
    let status = store
        .list::<Request>(None, None)?
        .first()
        .map_or(RequestStatus::New, |r| r.status);
    Ok(CarouselRun {
        policy: *policy,
        metrics: m,
        request_status: status,
        occupancy: fp.series,
        bytes_staged,
        bytes_processed: processed,
        bytes_abandoned: abandoned,
    })
}

/// Ratios of one policy's metrics to the baseline's. 0/0 counts as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyRatios {
    pub peak_disk: f64,
    pub mean_attempts: f64,
    pub disk_byte_seconds: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// In the order given; the first is the baseline of every ratio.
    pub runs: Vec<CarouselRun>,
}

impl Comparison {
    pub fn ratios(&self, i: usize) -> PolicyRatios {
        let (base, run) = (&self.runs[0].metrics, &self.runs[i].metrics);
        PolicyRatios {
            peak_disk: ratio(run.peak_disk_bytes as f64, base.peak_disk_bytes as f64),
            mean_attempts: ratio(run.mean_attempts(), base.mean_attempts()),
            disk_byte_seconds: ratio(run.disk_byte_seconds as f64, base.disk_byte_seconds as f64),
        }
    }

    /// One summary row per policy.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "policy",
            "jobs",
            "mean_attempts",
            "peak_disk_bytes",
            "disk_byte_seconds",
            "makespan_s",
            "time_to_first_processing_s",
            "peak_disk_ratio",
            "mean_attempts_ratio",
            "disk_byte_seconds_ratio",
        ])
        .expect("in-memory write");
        for (i, run) in self.runs.iter().enumerate() {
            let m = &run.metrics;
            let r = self.ratios(i);
            w.write_record([
                run.policy.to_string(),
                m.jobs().to_string(),
                format!("{:.4}", m.mean_attempts()),
                m.peak_disk_bytes.to_string(),
                m.disk_byte_seconds.to_string(),
                seconds(m.makespan),
                seconds(m.time_to_first_processing),
                format!("{:.4}", r.peak_disk),
                format!("{:.4}", r.mean_attempts),
                format!("{:.4}", r.disk_byte_seconds),
            ])
            .expect("in-memory write");
        }
        into_string(w)
    }

    /// Plot data: `policy,attempts,jobs`.
    pub fn histogram_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["policy", "attempts", "jobs"]).expect("in-memory write");
        for run in &self.runs {
            for (a, n) in &run.metrics.attempts_histogram {
                w.write_record([run.policy.to_string(), a.to_string(), n.to_string()])
                    .expect("in-memory write");
            }
        }
        into_string(w)
    }

    /// Plot data: `policy,time_s,bytes`, a step function per policy.
    pub fn occupancy_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["policy", "time_s", "bytes"]).expect("in-memory write");
        for run in &self.runs {
            for (t, b) in &run.occupancy {
                w.write_record([run.policy.to_string(), seconds(*t), b.to_string()])
                    .expect("in-memory write");
            }
        }
        into_string(w)
    }
}

fn seconds(ms: Millis) -> String {
    format!("{:.3}", ms as f64 / 1000.0)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Runs every policy on fresh copies of the scenario's backends, on
/// virtual time. Policies run in parallel when the feature is on.
pub fn compare_policies(scenario: &Scenario, policies: &[CarouselPolicy]) -> Result<Comparison, CarouselError> {
    if policies.len() < 2 {
        return Err(CarouselError::Config("compare needs at least two policies".into()));
    }
    let mut virt = scenario.clone();
    virt.clock.mode = ClockMode::Virtual;
    let runs = crate::sweep::map(policies, |p| run_scenario(&virt, p, Duration::ZERO));
    Ok(Comparison {
        runs: runs.into_iter().collect::<Result<_, _>>()?,
    })
}
