//! Data management (DDM) and workload management (WFM) backend interfaces,
//! with deterministic simulated implementations.

mod compute;
mod flaky;
mod instant;
mod scenario;
mod tape;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compute::{ComputeSim, ComputeSimConfig};
pub use flaky::{FlakyDdm, FlakyWfm};
pub use instant::{InstantDdm, InstantWfm, MetricScript};
pub use scenario::{ClockConfig, ClockMode, Scenario};
pub use tape::{Footprint, StageSchedule, TapeFile, TapeSim, TapeSimConfig};

use crate::clock::Millis;
use crate::model::ParamValue;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("unknown dataset {scope}:{name}")]
    UnknownDataset { scope: String, name: String },
    #[error("unknown handle `{0}`")]
    UnknownHandle(String),
    #[error("rejected: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageState {
    OnTape,
    Staging,
    OnDisk,
}

/// Who is asking for a dataset; generative sources key their output on it.
#[derive(Debug, Clone, Default)]
pub struct ResolveContext {
    pub request_id: String,
    pub work_id: String,
    /// The Work's substituted executable spec.
    pub executable: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

impl FileEntry {
    pub fn new(name: &str, size_bytes: u64) -> Self {
        Self {
            name: name.to_string(),
            size_bytes,
            depends_on: Vec::new(),
            payload: None,
        }
    }
}

pub trait DdmBackend: Send {
    /// File list of a dataset. Stable: equal arguments give equal lists.
    fn resolve_collection(
        &mut self,
        scope: &str,
        name: &str,
        ctx: &ResolveContext,
    ) -> Result<Vec<FileEntry>, BackendError>;

    fn stage_status(
        &mut self,
        scope: &str,
        name: &str,
        file: &str,
        now: Millis,
    ) -> Result<StageState, BackendError>;

    /// Frees the disk copy of a file. Idempotent.
    fn release(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<(), BackendError>;

    /// When the file behind `did` is (or will be) on disk; `None` if never.
    fn ready_at(&self, _did: &str) -> Option<Millis> {
        Some(0)
    }

    /// Next instant after `now` at which this backend changes by itself.
    fn next_event_time(&self, _now: Millis) -> Option<Millis> {
        None
    }
}

/// Everything a WFM needs to run a Processing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingDescriptor {
    pub processing_id: String,
    pub work_id: String,
    pub request_id: String,
    pub template: String,
    pub executable: String,
    pub bindings: BTreeMap<String, ParamValue>,
    pub generation: u32,
    /// Number of input contents the Processing will eventually release.
    pub total_inputs: usize,
    /// Resolved input dataset.
    pub input_scope: String,
    pub input_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobInput {
    pub content_id: String,
    pub did: String,
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobOutcome {
    Pending,
    Processed,
    /// Failed with no attempts left.
    Abandoned,
}

/// Current state of one content at the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentReport {
    pub content_id: String,
    /// Attempts started so far, including a pending one.
    pub attempts: u32,
    pub outcome: JobOutcome,
    pub started_at: Option<Millis>,
    pub finished_at: Option<Millis>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PollReport {
    /// Contents whose state changed after the `since` cursor.
    pub entries: Vec<ContentReport>,
    pub cursor: u64,
    /// Stable once true.
    pub terminal: bool,
    pub metrics: BTreeMap<String, f64>,
}

pub trait WfmBackend: Send {
    /// Idempotent per `processing_id`.
    fn submit(&mut self, desc: &ProcessingDescriptor, now: Millis) -> Result<String, BackendError>;

    /// Hands jobs to the broker, one job per bundle. Contents already
    /// released are ignored.
    fn release(&mut self, external_id: &str, bundles: &[Vec<JobInput>], now: Millis) -> Result<(), BackendError>;

    fn poll(&mut self, external_id: &str, since: u64, now: Millis) -> Result<PollReport, BackendError>;

    fn kill(&mut self, external_id: &str, now: Millis) -> Result<(), BackendError>;

    fn next_event_time(&self, _now: Millis) -> Option<Millis> {
        None
    }
}

pub type SharedDdm = Arc<Mutex<dyn DdmBackend>>;
pub type SharedWfm = Arc<Mutex<dyn WfmBackend>>;

pub fn shared_ddm<D: DdmBackend + 'static>(d: D) -> SharedDdm {
    Arc::new(Mutex::new(d))
}

pub fn shared_wfm<W: WfmBackend + 'static>(w: W) -> SharedWfm {
    Arc::new(Mutex::new(w))
}

/// Dispatches DDM calls by scope.
#[derive(Clone, Default)]
pub struct DdmRouter {
    routes: BTreeMap<String, SharedDdm>,
    fallback: Option<SharedDdm>,
}

impl DdmRouter {
    pub fn new(fallback: Option<SharedDdm>) -> Self {
        Self {
            routes: BTreeMap::new(),
            fallback,
        }
    }

    pub fn route(mut self, scope: &str, ddm: SharedDdm) -> Self {
        self.routes.insert(scope.to_string(), ddm);
        self
    }

    fn pick(&self, scope: &str) -> Result<&SharedDdm, BackendError> {
        self.routes
            .get(scope)
            .or(self.fallback.as_ref())
            .ok_or_else(|| BackendError::Unavailable(format!("no DDM for scope `{scope}`")))
    }
}

fn scope_of(did: &str) -> &str {
    did.split_once(':').map_or(did, |(s, _)| s)
}

impl DdmBackend for DdmRouter {
    fn resolve_collection(&mut self, scope: &str, name: &str, ctx: &ResolveContext) -> Result<Vec<FileEntry>, BackendError> {
        self.pick(scope)?.lock().resolve_collection(scope, name, ctx)
    }

    fn stage_status(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<StageState, BackendError> {
        self.pick(scope)?.lock().stage_status(scope, name, file, now)
    }

    fn release(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<(), BackendError> {
        self.pick(scope)?.lock().release(scope, name, file, now)
    }

    fn ready_at(&self, did: &str) -> Option<Millis> {
        self.pick(scope_of(did)).ok()?.lock().ready_at(did)
    }

    fn next_event_time(&self, now: Millis) -> Option<Millis> {
        self.routes
            .values()
            .chain(self.fallback.iter())
            .filter_map(|d| d.lock().next_event_time(now))
            .min()
    }
}

/// Dispatches Processings by input scope. External ids are prefixed with
/// the route so later calls find their backend without any table.
#[derive(Clone)]
pub struct WfmRouter {
    routes: BTreeMap<String, SharedWfm>,
    fallback: SharedWfm,
}

const FALLBACK_ROUTE: &str = "*";

impl WfmRouter {
    pub fn new(fallback: SharedWfm) -> Self {
        Self {
            routes: BTreeMap::new(),
            fallback,
        }
    }

    pub fn route(mut self, scope: &str, wfm: SharedWfm) -> Self {
        assert!(!scope.contains('|') && scope != FALLBACK_ROUTE, "reserved scope `{scope}`");
        self.routes.insert(scope.to_string(), wfm);
        self
    }

    fn split<'a>(&self, external_id: &'a str) -> Result<(&SharedWfm, &'a str), BackendError> {
        let (route, inner) = external_id
            .split_once('|')
            .ok_or_else(|| BackendError::UnknownHandle(external_id.into()))?;
        let wfm = if route == FALLBACK_ROUTE {
            &self.fallback
        } else {
            self.routes
                .get(route)
                .ok_or_else(|| BackendError::UnknownHandle(external_id.into()))?
        };
        Ok((wfm, inner))
    }
}

impl WfmBackend for WfmRouter {
    fn submit(&mut self, desc: &ProcessingDescriptor, now: Millis) -> Result<String, BackendError> {
        let (route, wfm) = match self.routes.get(&desc.input_scope) {
            Some(w) => (desc.input_scope.as_str(), w),
            None => (FALLBACK_ROUTE, &self.fallback),
        };
        let inner = wfm.lock().submit(desc, now)?;
        Ok(format!("{route}|{inner}"))
    }

    fn release(&mut self, external_id: &str, bundles: &[Vec<JobInput>], now: Millis) -> Result<(), BackendError> {
        let (wfm, inner) = self.split(external_id)?;
        wfm.lock().release(inner, bundles, now)
    }

    fn poll(&mut self, external_id: &str, since: u64, now: Millis) -> Result<PollReport, BackendError> {
        let (wfm, inner) = self.split(external_id)?;
        wfm.lock().poll(inner, since, now)
    }

    fn kill(&mut self, external_id: &str, now: Millis) -> Result<(), BackendError> {
        let (wfm, inner) = self.split(external_id)?;
        wfm.lock().kill(inner, now)
    }

    fn next_event_time(&self, now: Millis) -> Option<Millis> {
        self.routes
            .values()
            .chain(std::iter::once(&self.fallback))
            .filter_map(|w| w.lock().next_event_time(now))
            .min()
    }
}

/// Uniform draw in [0, 1) from a hash of `parts`.
pub(crate) fn unit_hash(seed: u64, parts: &[&str]) -> f64 {
    let s = seed.to_string();
    let mut all = vec![s.as_str()];
    all.extend_from_slice(parts);
    // FNV alone barely moves its high bits when only a trailing character
    // changes (attempt numbers), so finish with the murmur3 mixer.
    let mut x = crate::ids::fnv1a64(&all);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 53) as f64
}
