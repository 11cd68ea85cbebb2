//! The five daemons and the drivers that run them.
//!
//! Each daemon owns only cursors and caches; all coordination goes through
//! store claims and compare-and-set transitions, so any daemon can be
//! killed and recreated at any point. Backend calls precede the store
//! writes that record them, and every backend call is idempotent, so a
//! step replayed after a crash converges on the same state.

mod carrier;
mod clerk;
mod conductor;
mod driver;
mod marshaller;
mod transformer;
mod transport;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use carrier::Carrier;
pub use clerk::Clerk;
pub use conductor::Conductor;
pub use conductor::HPO_SCOPE;
pub use driver::{run_pipeline, Daemon, DriverStats, Pipeline, PipelineHandle};
pub use marshaller::Marshaller;
pub use transformer::Transformer;
pub use transport::{MemoryTransport, Transport};

use crate::backends::{SharedDdm, SharedWfm};
use crate::clock::Millis;
use crate::model::{ParamValue, Work, Workflow};
use crate::store::{Request, RequestStatus, Store, StoreError, StoreResult, DEFAULT_LEASE_MS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaemonConfig {
    /// Pause between steps in real-time mode.
    pub poll_interval: Millis,
    pub batch_size: usize,
    pub worker_id: String,
    pub max_retries: u32,
    pub lease: Millis,
}

impl DaemonConfig {
    pub fn new(worker_id: &str) -> Self {
        Self {
            poll_interval: 1_000,
            batch_size: 50,
            worker_id: worker_id.to_string(),
            max_retries: 3,
            lease: DEFAULT_LEASE_MS,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.poll_interval == 0 {
            return Err("poll_interval must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.lease == 0 {
            return Err("lease must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no progress after {0} rounds")]
    Stalled(u64),
    #[error("invalid config: {0}")]
    Config(String),
}

/// The external systems a pipeline talks to.
#[derive(Clone)]
pub struct Backends {
    pub ddm: SharedDdm,
    pub wfm: SharedWfm,
}

/// Monotone counters across all daemons.
#[derive(Debug, Default)]
pub struct PipelineStats {
    pub requests_advanced: AtomicU64,
    pub works_generated: AtomicU64,
    pub processings_created: AtomicU64,
    pub processings_advanced: AtomicU64,
    pub messages_delivered: AtomicU64,
    pub step_panics: AtomicU64,
    pub step_errors: AtomicU64,
}

impl PipelineStats {
    pub fn snapshot(&self) -> Vec<(&'static str, u64)> {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        vec![
            ("requests_advanced", g(&self.requests_advanced)),
            ("works_generated", g(&self.works_generated)),
            ("processings_created", g(&self.processings_created)),
            ("processings_advanced", g(&self.processings_advanced)),
            ("messages_delivered", g(&self.messages_delivered)),
            ("step_panics", g(&self.step_panics)),
            ("step_errors", g(&self.step_errors)),
        ]
    }
}

pub(crate) fn bump(a: &AtomicU64, n: usize) {
    a.fetch_add(n as u64, Ordering::Relaxed);
}

/// Lost races are not errors: another replica already did the work.
pub(crate) fn tolerate<T>(r: StoreResult<T>) -> StoreResult<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(StoreError::StaleTransition { .. }) | Err(StoreError::Conflict { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Stores a New request whose workflow is the given JSON text. The text is
/// not checked here; the Clerk fails requests that do not parse.
pub fn submit_text(store: &Store, workflow: &str, requester: &str, consumer: &str) -> StoreResult<Request> {
    store.insert_request(|id| Request {
        request_id: id,
        requester: requester.to_string(),
        workflow: workflow.to_string(),
        consumer: consumer.to_string(),
        status: RequestStatus::New,
        created_at: store.now(),
        updated_at: 0,
        report: None,
        error: None,
        idempotency_key: None,
        body_digest: None,
    })
}

pub fn submit(store: &Store, wf: &Workflow, requester: &str, consumer: &str) -> StoreResult<Request> {
    let text = serde_json::to_string(wf).expect("workflow serializes");
    submit_text(store, &text, requester, consumer)
}

/// Request workflows, parsed once per daemon.
#[derive(Default)]
pub(crate) struct WorkflowCache {
    map: HashMap<String, Arc<Workflow>>,
}

impl WorkflowCache {
    pub fn get(&mut self, store: &Store, request_id: &str) -> StoreResult<Option<Arc<Workflow>>> {
        if let Some(wf) = self.map.get(request_id) {
            return Ok(Some(wf.clone()));
        }
        let req = store.get::<Request>(request_id)?;
        match serde_json::from_str::<Workflow>(&req.workflow) {
            Ok(wf) => {
                let wf = Arc::new(wf);
                self.map.insert(request_id.to_string(), wf.clone());
                Ok(Some(wf))
            }
            Err(_) => Ok(None),
        }
    }
}

/// How a Work's inputs are handed to the WFM, read from reserved bindings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryHints {
    /// All inputs released at activation, regardless of staging.
    pub dataset_level: bool,
    pub bundle_size: usize,
    /// Free each input's disk copy as soon as it is processed.
    pub prompt_release: bool,
}

pub const GRANULARITY: &str = "granularity";
pub const BUNDLE_SIZE: &str = "bundle_size";
pub const PROMPT_RELEASE: &str = "prompt_release";

impl DeliveryHints {
    pub fn of(work: &Work) -> Self {
        let dataset_level = matches!(
            work.bindings.get(GRANULARITY),
            Some(ParamValue::Str(s)) if s == "dataset"
        );
        let bundle_size = match work.bindings.get(BUNDLE_SIZE) {
            Some(ParamValue::Int(n)) if *n >= 1 && !dataset_level => *n as usize,
            _ => 1,
        };
        let prompt_release = !dataset_level
            && matches!(work.bindings.get(PROMPT_RELEASE), Some(ParamValue::Bool(true)));
        Self {
            dataset_level,
            bundle_size,
            prompt_release,
        }
    }
}
