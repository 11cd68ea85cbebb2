use serde_json::json;

use super::{generate_points, read_trials, should_stop, HpoError, HpoTaskSpec, HPO_SCOPE};
use crate::backends::{BackendError, DdmBackend, FileEntry, ResolveContext, StageState};
use crate::clock::Millis;
use crate::store::Store;

/// Dataset source for scope `hpo`. Resolving `hpo:<task>` for a Work
/// generates that Work's round from the losses of the request's earlier
/// rounds; the task spec travels as the Work's executable text. A finished
/// task resolves to an empty dataset.
///
/// Generation reads only settled rounds, so a repeated lookup for the same
/// Work returns the same points.
#[derive(Clone)]
pub struct HpoPointSource {
    store: Store,
}

impl HpoPointSource {
    pub fn new(store: Store) -> Self {
        Self { store }
    }

    fn points(&self, task_name: &str, ctx: &ResolveContext) -> Result<Vec<FileEntry>, BackendError> {
        let task: HpoTaskSpec = serde_json::from_str(&ctx.executable)
            .map_err(|e| BackendError::Rejected(format!("task spec: {e}")))?;
        let history = read_trials(&self.store, &ctx.request_id, task_name, Some(&ctx.work_id))
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if should_stop(&task, &history) {
            return Ok(Vec::new());
        }
        let batch = match generate_points(&task, &history) {
            Ok(b) => b,
            Err(HpoError::ExhaustedSpace) => return Ok(Vec::new()),
            Err(e) => return Err(BackendError::Rejected(e.to_string())),
        };
        Ok(batch
            .into_iter()
            .map(|p| FileEntry {
                payload: Some(json!({"values": p.values, "iteration": p.iteration})),
                ..FileEntry::new(&p.point_id, 0)
            })
            .collect())
    }
}

impl DdmBackend for HpoPointSource {
    fn resolve_collection(&mut self, scope: &str, name: &str, ctx: &ResolveContext) -> Result<Vec<FileEntry>, BackendError> {
        if scope != HPO_SCOPE {
            return Err(BackendError::UnknownDataset {
                scope: scope.into(),
                name: name.into(),
            });
        }
        self.points(name, ctx)
    }

    fn stage_status(&mut self, _scope: &str, _name: &str, _file: &str, _now: Millis) -> Result<StageState, BackendError> {
        Ok(StageState::OnDisk)
    }

    fn release(&mut self, _scope: &str, _name: &str, _file: &str, _now: Millis) -> Result<(), BackendError> {
        Ok(())
    }
}
