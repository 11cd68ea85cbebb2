use std::collections::BTreeMap;
use std::sync::Arc;

use super::{bump, tolerate, DaemonConfig, PipelineStats, WorkflowCache};
use crate::model::{evaluate_activation, evaluate_conditions_lenient, Evaluation, Trigger, Work, WorkStatus, Workflow};
use crate::store::{Request, RequestStatus, Store, StoreResult, WorkRecord};

/// Expands terminated Works along their condition branches and finalizes
/// requests whose Works are all done.
pub struct Marshaller {
    store: Store,
    cfg: DaemonConfig,
    stats: Arc<PipelineStats>,
    workflows: WorkflowCache,
}

/// Request outcome from its Works. A suppressed branch means the graph did
/// not run to completion, so it caps the outcome at SubFinished.
pub fn request_outcome(works: &[WorkRecord]) -> RequestStatus {
    let finished = works
        .iter()
        .filter(|w| w.work.status == WorkStatus::Finished)
        .count();
    let suppressed = works.iter().any(|w| !w.suppressed.is_empty());
    if finished == 0 {
        RequestStatus::Failed
    } else if finished == works.len() && !suppressed {
        RequestStatus::Finished
    } else {
        RequestStatus::SubFinished
    }
}

fn evaluate(wf: &Workflow, trigger: Trigger, w: &Work, existing: &BTreeMap<String, u32>) -> Evaluation {
    match trigger {
        Trigger::Activated => evaluate_activation(wf, w, existing),
        Trigger::Terminated => evaluate_conditions_lenient(wf, w, existing),
    }
}

impl Marshaller {
    pub fn new(store: Store, cfg: DaemonConfig, stats: Arc<PipelineStats>) -> Self {
        Self {
            store,
            cfg,
            stats,
            workflows: WorkflowCache::default(),
        }
    }

    pub fn step(&mut self) -> StoreResult<usize> {
        let generated = self.expand(Trigger::Activated)? + self.expand(Trigger::Terminated)?;
        self.finalize()?;
        bump(&self.stats.works_generated, generated);
        Ok(generated)
    }

    fn expand(&mut self, trigger: Trigger) -> StoreResult<usize> {
        let key = match trigger {
            Trigger::Activated => "activated",
            Trigger::Terminated => "unevaluated",
        };
        let done = self.store.claim::<WorkRecord>(key, &self.cfg.worker_id, self.cfg.lease, self.cfg.batch_size)?;
        let mut generated = 0;
        for w in done {
            let id = w.work.work_id.clone();
            let Some(wf) = self.workflows.get(&self.store, &w.request_id)? else {
                continue;
            };
            // Children of this very evaluation are left out of the counts,
            // so a replay after a crash reproduces the same set.
            let own = wf.child_ids(&id, &w.work.template_name, trigger);
            let mut existing = BTreeMap::<String, u32>::new();
            for other in self
                .store
                .list_by::<WorkRecord>(&format!("owner:{}", w.request_id))?
            {
                if !own.contains(&other.work.work_id) {
                    *existing.entry(other.work.template_name).or_default() += 1;
                }
            }
            let eval = evaluate(&wf, trigger, &w.work, &existing);
            let now = self.store.now();
            let children: Vec<WorkRecord> = eval
                .works
                .into_iter()
                .map(|c| {
                    let mut rec = WorkRecord::new(c, &w.request_id, Some(&id), now);
                    rec.activation_pending = wf.has_activation_branches(&rec.work.template_name);
                    rec
                })
                .collect();
            let inserted = self.store.put_missing(children)?;
            for s in &eval.suppressed {
                tracing::warn!(
                    daemon = "marshaller",
                    entity = %id,
                    template = %s.template,
                    reason = ?s.reason,
                    detail = %s.detail,
                    "branch suppressed"
                );
            }
            let suppressed = eval.suppressed;
            tolerate(self.store.patch::<WorkRecord>(&id, |r| {
                match trigger {
                    Trigger::Activated => r.activation_pending = false,
                    Trigger::Terminated => r.evaluated = true,
                }
                r.suppressed.extend(suppressed);
            }))?;
            self.store.release::<WorkRecord>(&id, &self.cfg.worker_id)?;
            if inserted > 0 {
                tracing::info!(daemon = "marshaller", entity = %id, generated = inserted);
            }
            generated += inserted;
        }
        Ok(generated)
    }

    fn finalize(&mut self) -> StoreResult<()> {
        for r in self.store.list::<Request>(Some(RequestStatus::Transforming), None)? {
            let works = self
                .store
                .list_by::<WorkRecord>(&format!("owner:{}", r.request_id))?;
            let settled = works
                .iter()
                .all(|w| w.work.status.is_terminal() && w.evaluated);
            if !settled {
                continue;
            }
            let outcome = request_outcome(&works);
            if tolerate(self.store.transition::<Request>(
                &r.request_id,
                RequestStatus::Transforming,
                outcome,
            ))?
            .is_some()
            {
                tracing::info!(
                    daemon = "marshaller",
                    entity = %r.request_id,
                    transition = %format!("Transforming->{outcome}"),
                    works = works.len()
                );
            }
        }
        Ok(())
    }
}
