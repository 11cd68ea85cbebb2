use std::sync::Arc;

use super::transformer::executable_of;
use super::{bump, tolerate, Backends, DaemonConfig, DeliveryHints, PipelineStats, WorkflowCache};
use crate::backends::{ContentReport, JobInput, JobOutcome, PollReport, ProcessingDescriptor};
use crate::ids;
use crate::model::WorkStatus;
use crate::store::{
    Collection, Content, ContentStatus, Processing, ProcessingStatus, Store, StoreResult,
    WorkRecord,
};

/// Moves Processings through the workload manager: submit, release inputs,
/// poll, reconcile per-content outcomes, and close out finished jobs.
pub struct Carrier {
    store: Store,
    cfg: DaemonConfig,
    stats: Arc<PipelineStats>,
    backends: Backends,
    workflows: WorkflowCache,
}

/// The content status walk from `c`'s current state to the reported
/// outcome, one retry cycle per extra broker attempt.
pub fn reconcile_path(c: &Content, report: &ContentReport) -> Vec<ContentStatus> {
    use ContentStatus::*;
    let mut path = Vec::new();
    let mut cur = c.status;
    let mut attempts = c.attempt_count.max(1);
    if cur == Failed && !c.abandoned {
        path.extend([Available, Delivered]);
        attempts += 1;
        cur = Delivered;
    }
    if cur == Available {
        path.push(Delivered);
        cur = Delivered;
    }
    if cur != Delivered {
        return Vec::new();
    }
    while attempts < report.attempts {
        path.extend([Failed, Available, Delivered]);
        attempts += 1;
    }
    match report.outcome {
        JobOutcome::Processed => path.push(Processed),
        JobOutcome::Abandoned => path.push(Failed),
        JobOutcome::Pending => {}
    }
    path
}

impl Carrier {
    pub fn new(store: Store, cfg: DaemonConfig, stats: Arc<PipelineStats>, backends: Backends) -> Self {
        Self {
            store,
            cfg,
            stats,
            backends,
            workflows: WorkflowCache::default(),
        }
    }

    pub fn step(&mut self) -> StoreResult<usize> {
        let mut advanced = self.catch_up_works()?;
        advanced += self.submit()?;
        let active: Vec<Processing> = [ProcessingStatus::Submitted, ProcessingStatus::Running]
            .into_iter()
            .map(|s| self.store.list::<Processing>(Some(s), None))
            .collect::<StoreResult<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        for p in active {
            let Some(w) = self.store.find::<WorkRecord>(&p.work_id)? else {
                continue;
            };
            self.deliver(&p, &w)?;
            if let Some(report) = self.poll(&p, &w)? {
                if self.complete(&p, &report)? {
                    advanced += 1;
                }
            }
        }
        bump(&self.stats.processings_advanced, advanced);
        Ok(advanced)
    }

    // ---- repair ----

    /// Submission and completion each write the Processing and then its
    /// Work. A crash between the two leaves the Work behind; catch it up.
    fn catch_up_works(&self) -> StoreResult<usize> {
        let mut n = 0;
        for status in [WorkStatus::Activated, WorkStatus::Running] {
            for w in self.store.list::<WorkRecord>(Some(status), None)? {
                let wid = &w.work.work_id;
                let Some(p) = self.store.find::<Processing>(&ids::processing_id(wid))? else {
                    continue;
                };
                let path: &[WorkStatus] = match (status, p.status) {
                    (_, ProcessingStatus::New) => continue,
                    (WorkStatus::Activated, ProcessingStatus::Submitted | ProcessingStatus::Running) => {
                        &[WorkStatus::Running]
                    }
                    (WorkStatus::Activated, _) => &[WorkStatus::Running, WorkStatus::Terminating],
                    (_, ProcessingStatus::Finished | ProcessingStatus::Failed) => &[WorkStatus::Terminating],
                    _ => continue,
                };
                let error = p.error.clone();
                let moved = tolerate(self.store.transition_with::<WorkRecord>(wid, status, path, |r| {
                    if r.error.is_none() {
                        r.error = error;
                    }
                }))?;
                if moved.is_some() {
                    tracing::info!(daemon = "carrier", entity = %wid, processing = %p.status, "work caught up");
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    // ---- submission ----

    fn submit(&mut self) -> StoreResult<usize> {
        let fresh = self.store.claim_status::<Processing>(
            ProcessingStatus::New,
            &self.cfg.worker_id,
            self.cfg.lease,
            self.cfg.batch_size,
        )?;
        let mut n = 0;
        for p in fresh {
            if self.submit_one(&p)? {
                n += 1;
            }
            self.store
                .release::<Processing>(&p.processing_id, &self.cfg.worker_id)?;
        }
        Ok(n)
    }

    fn submit_one(&mut self, p: &Processing) -> StoreResult<bool> {
        let w = self.store.get::<WorkRecord>(&p.work_id)?;
        let Some(wf) = self.workflows.get(&self.store, &p.request_id)? else {
            return Ok(false);
        };
        let executable = wf
            .template(&w.work.template_name)
            .map(|t| executable_of(t, &w))
            .unwrap_or_default();
        let input = self.store.get::<Collection>(&ids::input_collection_id(&p.work_id))?;
        let desc = ProcessingDescriptor {
            processing_id: p.processing_id.clone(),
            work_id: p.work_id.clone(),
            request_id: p.request_id.clone(),
            template: w.work.template_name.clone(),
            executable,
            bindings: w.work.bindings.clone(),
            generation: w.work.generation,
            total_inputs: input.total_contents as usize,
            input_scope: input.scope,
            input_name: input.name,
        };
        let now = self.store.now();
        let result = self.backends.wfm.lock().submit(&desc, now);
        match result {
            Ok(ext) => {
                let moved = tolerate(self.store.transition_with::<Processing>(
                    &p.processing_id,
                    ProcessingStatus::New,
                    &[ProcessingStatus::Submitted],
                    |r| {
                        r.external_id = ext.clone();
                        r.submitted_at = Some(now);
                        r.submit_attempts += 1;
                    },
                ))?;
                tolerate(self.store.transition::<WorkRecord>(
                    &p.work_id,
                    WorkStatus::Activated,
                    WorkStatus::Running,
                ))?;
                if moved.is_some() {
                    tracing::info!(
                        daemon = "carrier",
                        entity = %p.processing_id,
                        transition = "New->Submitted",
                        external = %ext,
                        at = now
                    );
                }
                Ok(moved.is_some())
            }
            Err(e) if p.submit_attempts + 1 > self.cfg.max_retries => {
                tracing::warn!(daemon = "carrier", entity = %p.processing_id, transition = "New->Failed", error = %e);
                let error = e.to_string();
                tolerate(self.store.transition_with::<Processing>(
                    &p.processing_id,
                    ProcessingStatus::New,
                    &[ProcessingStatus::Failed],
                    |r| {
                        r.external_id = "unsubmitted".into();
                        r.submit_attempts += 1;
                        r.error = Some(error.clone());
                    },
                ))?;
                tolerate(self.store.transition_with::<WorkRecord>(
                    &p.work_id,
                    WorkStatus::Activated,
                    &[WorkStatus::Running, WorkStatus::Terminating],
                    |r| r.error = Some(error),
                ))?;
                Ok(true)
            }
            Err(e) => {
                tracing::warn!(daemon = "carrier", entity = %p.processing_id, error = %e, "submit retry");
                tolerate(self.store.patch::<Processing>(&p.processing_id, |r| r.submit_attempts += 1))?;
                Ok(false)
            }
        }
    }

    // ---- delivery ----

    /// Releases Available inputs to the broker in bundles. A short bundle is
    /// sent only once no input is left waiting to become available.
    fn deliver(&mut self, p: &Processing, w: &WorkRecord) -> StoreResult<()> {
        let wid = &p.work_id;
        let mut ready = self
            .store
            .list_by::<Content>(&format!("work:{wid}:Available"))?;
        if ready.is_empty() {
            return Ok(());
        }
        ready.sort_by(|a, b| a.content_id.cmp(&b.content_id));
        let hints = DeliveryHints::of(&w.work);
        let waiting = self.store.count_by::<Content>(&format!("work:{wid}:New"))? > 0;
        let full = ready.len() / hints.bundle_size * hints.bundle_size;
        let take = if waiting { full } else { ready.len() };
        if take == 0 {
            return Ok(());
        }
        let bundles: Vec<Vec<JobInput>> = ready[..take]
            .chunks(hints.bundle_size)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|c| JobInput {
                        content_id: c.content_id.clone(),
                        did: c.did.clone(),
                        size_bytes: c.size_bytes,
                        payload: c.payload.clone(),
                    })
                    .collect()
            })
            .collect();
        let now = self.store.now();
        let sent = self
            .backends
            .wfm
            .lock()
            .release(&p.external_id, &bundles, now);
        if let Err(e) = sent {
            tracing::warn!(daemon = "carrier", entity = %p.processing_id, error = %e, "release failed");
            return Ok(());
        }
        for c in &ready[..take] {
            tolerate(self.store.transition::<Content>(
                &c.content_id,
                ContentStatus::Available,
                ContentStatus::Delivered,
            ))?;
        }
        if p.status == ProcessingStatus::Submitted {
            tolerate(self.store.transition::<Processing>(
                &p.processing_id,
                ProcessingStatus::Submitted,
                ProcessingStatus::Running,
            ))?;
        }
        tracing::debug!(daemon = "carrier", entity = %p.processing_id, released = take, at = now);
        Ok(())
    }

    // ---- polling ----

    fn poll(&mut self, p: &Processing, w: &WorkRecord) -> StoreResult<Option<PollReport>> {
        let now = self.store.now();
        let polled = self
            .backends
            .wfm
            .lock()
            .poll(&p.external_id, p.poll_cursor, now);
        let report = match polled {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(daemon = "carrier", entity = %p.processing_id, error = %e, "poll failed");
                return Ok(None);
            }
        };
        let hints = DeliveryHints::of(&w.work);
        let coll = self
            .store
            .get::<Collection>(&ids::input_collection_id(&p.work_id))?;
        for entry in &report.entries {
            self.reconcile(entry, &coll, hints)?;
        }
        if report.cursor != p.poll_cursor {
            tolerate(self.store.patch::<Processing>(&p.processing_id, |r| {
                r.poll_cursor = report.cursor;
                r.polled_at = Some(now);
            }))?;
        }
        Ok(Some(report))
    }

    fn reconcile(&self, entry: &ContentReport, coll: &Collection, hints: DeliveryHints) -> StoreResult<()> {
        let Some(c) = self.store.find::<Content>(&entry.content_id)? else {
            return Ok(());
        };
        if c.is_final() {
            // A crash may have split the input and output writes.
            if c.status == ContentStatus::Processed {
                self.publish_output(&c, entry)?;
            }
            return Ok(());
        }
        let path = reconcile_path(&c, entry);
        if path.is_empty() {
            return Ok(());
        }
        let last = *path.last().expect("non-empty");
        if last == ContentStatus::Processed && hints.prompt_release {
            let now = self.store.now();
            let freed = self
                .backends
                .ddm
                .lock()
                .release(&coll.scope, &coll.name, &c.name, now);
            if let Err(e) = freed {
                tracing::warn!(daemon = "carrier", entity = %c.content_id, error = %e, "disk release failed");
            }
        }
        let settled = matches!(entry.outcome, JobOutcome::Processed | JobOutcome::Abandoned);
        tolerate(self.store.transition_with::<Content>(&c.content_id, c.status, &path, |r| {
            if entry.started_at.is_some() {
                r.started_at = entry.started_at;
            }
            if settled {
                r.finished_at = entry.finished_at;
                r.abandoned = entry.outcome == JobOutcome::Abandoned;
                r.metrics.extend(entry.metrics.clone());
            }
        }))?;
        if last == ContentStatus::Processed {
            self.publish_output(&c, entry)?;
        }
        Ok(())
    }

    fn publish_output(&self, input: &Content, entry: &ContentReport) -> StoreResult<()> {
        let idx = ids::content_index(&input.content_id).unwrap_or(0);
        let out = ids::content_id(&ids::output_collection_id(&input.work_id), idx);
        tolerate(self.store.transition_with::<Content>(
            &out,
            ContentStatus::New,
            &[ContentStatus::Available],
            |r| {
                r.metrics = entry.metrics.clone();
                r.finished_at = entry.finished_at;
            },
        ))?;
        Ok(())
    }

    // ---- completion ----

    /// Closes the job once every input is processed or abandoned.
    fn complete(&self, p: &Processing, report: &PollReport) -> StoreResult<bool> {
        let wid = &p.work_id;
        let total = self
            .store
            .get::<Collection>(&ids::input_collection_id(wid))?
            .total_contents as usize;
        let processed = self.store.count_by::<Content>(&format!("work:{wid}:Processed"))?;
        let failed = self.store.count_by::<Content>(&format!("work:{wid}:Failed"))?;
        if total == 0 || processed + failed < total {
            return Ok(false);
        }
        let now = self.store.now();
        if let Err(e) = self.backends.wfm.lock().kill(&p.external_id, now) {
            tracing::warn!(daemon = "carrier", entity = %p.processing_id, error = %e, "kill failed");
        }
        let metrics = report.metrics.clone();
        tolerate(self.store.transition_with::<WorkRecord>(
            wid,
            WorkStatus::Running,
            &[WorkStatus::Terminating],
            |r| r.work.output_metrics.extend(metrics),
        ))?;
        let to = if processed > 0 {
            ProcessingStatus::Finished
        } else {
            ProcessingStatus::Failed
        };
        let moved = tolerate(self.store.transition::<Processing>(&p.processing_id, p.status, to))?;
        if moved.is_some() {
            tracing::info!(
                daemon = "carrier",
                entity = %p.processing_id,
                transition = %format!("{}->{to}", p.status),
                processed,
                failed,
                at = now
            );
        }
        Ok(moved.is_some())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::store::CollectionKind;

    fn content(status: ContentStatus, attempts: u32) -> Content {
        Content {
            content_id: "c".into(),
            collection_id: "k".into(),
            request_id: "r".into(),
            work_id: "w".into(),
            kind: CollectionKind::Input,
            name: "f".into(),
            did: "s:d/f".into(),
            size_bytes: 0,
            status,
            attempt_count: attempts,
            abandoned: false,
            depends_on: Vec::new(),
            metrics: BTreeMap::new(),
            payload: None,
            started_at: None,
            finished_at: None,
            updated_at: 0,
        }
    }

    fn report(outcome: JobOutcome, attempts: u32) -> ContentReport {
        ContentReport {
            content_id: "c".into(),
            attempts,
            outcome,
            started_at: None,
            finished_at: None,
            metrics: BTreeMap::new(),
        }
    }

    #[test]
    fn single_attempt_success() {
        use ContentStatus::*;
        let p = reconcile_path(&content(Delivered, 1), &report(JobOutcome::Processed, 1));
        assert_eq!(p, vec![Processed]);
    }

    #[test]
    fn retries_replay_as_failed_cycles() {
        use ContentStatus::*;
        let p = reconcile_path(&content(Delivered, 1), &report(JobOutcome::Processed, 3));
        assert_eq!(
            p,
            vec![Failed, Available, Delivered, Failed, Available, Delivered, Processed]
        );
    }

    #[test]
    fn available_content_is_delivered_first_and_abandon_fails() {
        use ContentStatus::*;
        let p = reconcile_path(&content(Available, 1), &report(JobOutcome::Abandoned, 2));
        assert_eq!(p, vec![Delivered, Failed, Available, Delivered, Failed]);
    }

    #[test]
    fn pending_only_catches_up_attempts() {
        use ContentStatus::*;
        let p = reconcile_path(&content(Delivered, 2), &report(JobOutcome::Pending, 2));
        assert!(p.is_empty());
        let p = reconcile_path(&content(New, 0), &report(JobOutcome::Processed, 1));
        assert!(p.is_empty());
    }
}
