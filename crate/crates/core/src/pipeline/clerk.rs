use std::sync::Arc;

use super::{bump, tolerate, DaemonConfig, PipelineStats};
use crate::model::{instantiate_entry_works_in, validate_workflow, ValidationReport, Workflow};
use crate::store::{Request, RequestStatus, Store, StoreResult, WorkRecord};

/// Turns New requests into entry Works.
pub struct Clerk {
    store: Store,
    cfg: DaemonConfig,
    stats: Arc<PipelineStats>,
}

impl Clerk {
    pub fn new(store: Store, cfg: DaemonConfig, stats: Arc<PipelineStats>) -> Self {
        Self { store, cfg, stats }
    }

    pub fn step(&mut self) -> StoreResult<usize> {
        let reqs = self.store.claim_status::<Request>(
            RequestStatus::New,
            &self.cfg.worker_id,
            self.cfg.lease,
            self.cfg.batch_size,
        )?;
        let mut advanced = 0;
        for r in reqs {
            if self.admit(&r)? {
                advanced += 1;
            }
            self.store.release::<Request>(&r.request_id, &self.cfg.worker_id)?;
        }
        bump(&self.stats.requests_advanced, advanced);
        Ok(advanced)
    }

    fn admit(&self, r: &Request) -> StoreResult<bool> {
        let wf: Workflow = match serde_json::from_str(&r.workflow) {
            Ok(wf) => wf,
            Err(e) => return self.fail(r, None, format!("workflow does not parse: {e}")),
        };
        let report = validate_workflow(&wf);
        if !report.is_empty() {
            return self.fail(r, Some(report), "workflow is not well-formed".into());
        }
        let works = match instantiate_entry_works_in(&wf, &r.request_id) {
            Ok(w) => w,
            Err(e) => return self.fail(r, None, e.to_string()),
        };
        let now = self.store.now();
        let records: Vec<WorkRecord> = works
            .into_iter()
            .map(|w| {
                let mut rec = WorkRecord::new(w, &r.request_id, None, now);
                rec.activation_pending = wf.has_activation_branches(&rec.work.template_name);
                rec
            })
            .collect();
        let n = records.len();
        self.store.put_missing(records)?;
        let moved = tolerate(self.store.transition::<Request>(
            &r.request_id,
            RequestStatus::New,
            RequestStatus::Transforming,
        ))?;
        if moved.is_some() {
            tracing::info!(
                daemon = "clerk",
                entity = %r.request_id,
                transition = "New->Transforming",
                works = n
            );
        }
        Ok(moved.is_some())
    }

    fn fail(&self, r: &Request, report: Option<ValidationReport>, error: String) -> StoreResult<bool> {
        tracing::info!(daemon = "clerk", entity = %r.request_id, transition = "New->Failed", %error);
        let moved = tolerate(self.store.transition_with::<Request>(
            &r.request_id,
            RequestStatus::New,
            &[RequestStatus::Transforming, RequestStatus::Failed],
            |req| {
                req.report = report;
                req.error = Some(error);
            },
        ))?;
        Ok(moved.is_some())
    }
}
