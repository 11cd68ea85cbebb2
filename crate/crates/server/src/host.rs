//! In-process daemons for a single-binary deployment.

use std::sync::Arc;

use dds_core::backends::{
    shared_ddm, shared_wfm, ComputeSim, ComputeSimConfig, DdmRouter, FileEntry, InstantDdm, InstantWfm, SharedDdm,
    SharedWfm, WfmRouter,
};
use dds_core::clock::Millis;
use dds_core::hpo::{EvaluatorHub, HpoPointSource, HPO_SCOPE};
use dds_core::pipeline::{run_pipeline, Backends, DaemonConfig, MemoryTransport, PipelineError, PipelineHandle};
use dds_core::store::Store;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scope: String,
    pub name: String,
    pub files: Vec<FileEntry>,
}

fn default_timeout() -> Millis {
    600_000
}

fn default_poll() -> Millis {
    200
}

/// What the hosted daemons talk to. Datasets are served as already on
/// disk; jobs run on a simulated pool when `compute` is set and complete
/// immediately otherwise. Scope `hpo` always goes to the evaluator hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub compute: Option<ComputeSimConfig>,
    /// A point fetched by a remote evaluator and not reported within this
    /// long counts as a failed attempt.
    #[serde(default = "default_timeout")]
    pub hpo_dispatch_timeout_ms: Millis,
    #[serde(default = "default_poll")]
    pub poll_interval_ms: Millis,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            compute: None,
            hpo_dispatch_timeout_ms: default_timeout(),
            poll_interval_ms: default_poll(),
        }
    }
}

impl BackendConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let c: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(c) = &self.compute {
            c.validate()?;
        }
        if self.hpo_dispatch_timeout_ms == 0 || self.poll_interval_ms == 0 {
            return Err("timeouts and intervals must be positive".into());
        }
        Ok(())
    }

    pub fn build(&self, store: &Store) -> Result<(Backends, Arc<Mutex<EvaluatorHub>>), String> {
        self.validate()?;
        let mut instant = InstantDdm::new();
        for d in &self.datasets {
            instant = instant.with_dataset(&d.scope, &d.name, d.files.clone());
        }
        let ddm: SharedDdm = Arc::new(Mutex::new(
            DdmRouter::new(Some(shared_ddm(instant))).route(HPO_SCOPE, shared_ddm(HpoPointSource::new(store.clone()))),
        ));
        let fallback: SharedWfm = match &self.compute {
            Some(c) => shared_wfm(ComputeSim::new(c.clone(), None)?),
            None => shared_wfm(InstantWfm::new()),
        };
        let hub = Arc::new(Mutex::new(EvaluatorHub::new().with_dispatch_timeout(self.hpo_dispatch_timeout_ms)));
        let hub_wfm: SharedWfm = hub.clone();
        let wfm = shared_wfm(WfmRouter::new(fallback).route(HPO_SCOPE, hub_wfm));
        Ok((Backends { ddm, wfm }, hub))
    }
}

/// Running daemons plus the hub they share with the HTTP handlers.
pub struct Hosted {
    pub handle: PipelineHandle,
    pub hub: Arc<Mutex<EvaluatorHub>>,
}

pub fn start_daemons(store: &Store, config: &BackendConfig, worker_id: &str) -> Result<Hosted, PipelineError> {
    let (backends, hub) = config.build(store).map_err(PipelineError::Config)?;
    let mut cfg = DaemonConfig::new(worker_id);
    cfg.poll_interval = config.poll_interval_ms;
    let handle = run_pipeline(store.clone(), backends, Arc::new(MemoryTransport::auto_ack()), cfg)?;
    Ok(Hosted { handle, hub })
}
