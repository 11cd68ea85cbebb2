use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use super::{bump, tolerate, Backends, DaemonConfig, DeliveryHints, PipelineStats, WorkflowCache};
use crate::backends::{FileEntry, ResolveContext, StageState};
use crate::ids;
use crate::model::{substitute_params, CollectionSpec, WorkStatus, WorkTemplate};
use crate::store::{
    Collection, CollectionKind, Content, ContentStatus, Kind, Message, MessageType, Processing,
    ProcessingStatus, Store, StoreResult, WorkRecord,
};

/// Where a Work's input listing came from.
enum Source {
    Inline(Vec<FileEntry>),
    Upstream(Vec<FileEntry>),
    Ddm(Vec<FileEntry>),
}

/// Materialises Works into collections, contents and a Processing, stages
/// inputs into availability, and settles Works once the Carrier hands them
/// back in Terminating.
pub struct Transformer {
    store: Store,
    cfg: DaemonConfig,
    stats: Arc<PipelineStats>,
    backends: Backends,
    workflows: WorkflowCache,
    /// Position in the audit feed; restarts at zero, which only replays
    /// idempotent dependency checks.
    audit_cursor: u64,
    /// Active Works whose dependent inputs were checked by this instance.
    dep_scanned: HashSet<String>,
}

struct Resolved {
    input: CollectionSpec,
    output: CollectionSpec,
    executable: String,
}

fn resolve_specs(tpl: &WorkTemplate, w: &WorkRecord) -> Result<Resolved, String> {
    let b = &w.work.bindings;
    let sub = |t: &str| substitute_params(t, b).map_err(|e| e.to_string());
    Ok(Resolved {
        input: CollectionSpec {
            scope: sub(&tpl.input_spec.scope)?,
            name: sub(&tpl.input_spec.name)?,
            files: tpl.input_spec.files.clone(),
        },
        output: CollectionSpec::new(&sub(&tpl.output_spec.scope)?, &sub(&tpl.output_spec.name)?),
        executable: sub(&tpl.executable_spec)?,
    })
}

/// The substituted executable of a Work, or its raw template text when a
/// binding is missing.
pub(crate) fn executable_of(tpl: &WorkTemplate, w: &WorkRecord) -> String {
    substitute_params(&tpl.executable_spec, &w.work.bindings)
        .unwrap_or_else(|_| tpl.executable_spec.clone())
}

impl Transformer {
    pub fn new(store: Store, cfg: DaemonConfig, stats: Arc<PipelineStats>, backends: Backends) -> Self {
        Self {
            store,
            cfg,
            stats,
            backends,
            workflows: WorkflowCache::default(),
            audit_cursor: 0,
            dep_scanned: HashSet::new(),
        }
    }

    pub fn step(&mut self) -> StoreResult<usize> {
        let created = self.activate()?;
        self.release_dependents()?;
        self.stage()?;
        self.settle()?;
        bump(&self.stats.processings_created, created);
        Ok(created)
    }

    // ---- activation ----

    fn activate(&mut self) -> StoreResult<usize> {
        let fresh = self.store.claim_status::<WorkRecord>(
            WorkStatus::New,
            &self.cfg.worker_id,
            self.cfg.lease,
            self.cfg.batch_size,
        )?;
        let mut created = 0;
        for w in fresh {
            let id = w.work.work_id.clone();
            if self.activate_one(&w)? {
                created += 1;
            }
            self.store.release::<WorkRecord>(&id, &self.cfg.worker_id)?;
        }
        Ok(created)
    }

    fn activate_one(&mut self, w: &WorkRecord) -> StoreResult<bool> {
        let id = &w.work.work_id;
        let Some(wf) = self.workflows.get(&self.store, &w.request_id)? else {
            return self.fail_new(w, "request workflow does not parse".into());
        };
        let Some(tpl) = wf.template(&w.work.template_name) else {
            return self.fail_new(w, format!("unknown template {}", w.work.template_name));
        };
        let spec = match resolve_specs(tpl, w) {
            Ok(s) => s,
            Err(e) => return self.fail_new(w, e),
        };
        let source = match self.resolve_inputs(w, &spec)? {
            Ok(s) => s,
            Err(e) => {
                if w.ddm_failures >= self.cfg.max_retries {
                    return self.fail_new(w, format!("input resolution failed: {e}"));
                }
                tracing::warn!(daemon = "transformer", entity = %id, error = %e, "input resolution retry");
                tolerate(self.store.patch::<WorkRecord>(id, |r| r.ddm_failures += 1))?;
                return Ok(false);
            }
        };
        let (files, staged) = match source {
            Source::Inline(f) | Source::Upstream(f) => (f, false),
            Source::Ddm(f) => (f, !DeliveryHints::of(&w.work).dataset_level),
        };
        self.materialise(w, &spec, &files, staged)?;
        let now = self.store.now();
        if files.is_empty() {
            let moved = tolerate(self.store.transition_with::<WorkRecord>(
                id,
                WorkStatus::New,
                &[
                    WorkStatus::Activated,
                    WorkStatus::Running,
                    WorkStatus::Terminating,
                    WorkStatus::Finished,
                ],
                |r| {
                    r.work.output_metrics.insert("n_inputs".into(), 0.0);
                },
            ))?;
            if moved.is_some() {
                tracing::info!(daemon = "transformer", entity = %id, transition = "New->Finished", inputs = 0);
            }
            return Ok(false);
        }
        let inserted = self.store.put_missing(vec![Processing {
            processing_id: ids::processing_id(id),
            work_id: id.clone(),
            request_id: w.request_id.clone(),
            external_id: String::new(),
            status: ProcessingStatus::New,
            submitted_at: None,
            polled_at: None,
            poll_cursor: 0,
            submit_attempts: 0,
            error: None,
        }])?;
        let moved = tolerate(self.store.transition::<WorkRecord>(
            id,
            WorkStatus::New,
            WorkStatus::Activated,
        ))?;
        if let Some(rec) = moved {
            tracing::info!(
                daemon = "transformer",
                entity = %id,
                transition = "New->Activated",
                inputs = files.len(),
                at = now
            );
            self.stage_work(&rec)?;
        }
        Ok(inserted > 0)
    }

    fn resolve_inputs(&mut self, w: &WorkRecord, spec: &Resolved) -> StoreResult<Result<Source, String>> {
        let scope = &spec.input.scope;
        let name = &spec.input.name;
        if let Some(files) = &spec.input.files {
            return Ok(Ok(Source::Inline(
                files
                    .iter()
                    .map(|f| FileEntry {
                        name: f.name.clone(),
                        size_bytes: f.size_bytes,
                        depends_on: f.depends_on.clone(),
                        payload: f.payload.clone(),
                    })
                    .collect(),
            )));
        }
        if let Some(files) = self.upstream(&w.request_id, scope, name)? {
            return Ok(Ok(Source::Upstream(files)));
        }
        let ctx = ResolveContext {
            request_id: w.request_id.clone(),
            work_id: w.work.work_id.clone(),
            executable: spec.executable.clone(),
        };
        let r = self.backends.ddm.lock().resolve_collection(scope, name, &ctx);
        Ok(r.map(Source::Ddm).map_err(|e| e.to_string()))
    }

    /// The produced outputs of the latest Work in this request that writes
    /// `scope:name`.
    fn upstream(&self, rid: &str, scope: &str, name: &str) -> StoreResult<Option<Vec<FileEntry>>> {
        let key = format!("dataset:{rid}:{scope}:{name}:{:?}", CollectionKind::Output);
        let mut best: Option<(u32, Collection)> = None;
        for c in self.store.list_by::<Collection>(&key)? {
            let g = self
                .store
                .find::<WorkRecord>(&c.work_id)?
                .map_or(0, |w| w.work.generation);
            if best.as_ref().is_none_or(|(bg, _)| g >= *bg) {
                best = Some((g, c));
            }
        }
        let Some((_, coll)) = best else {
            return Ok(None);
        };
        let mut files = Vec::new();
        for c in self.store.list::<Content>(None, Some(&coll.collection_id))? {
            if c.status.counts_available() {
                files.push(FileEntry {
                    name: c.name,
                    size_bytes: c.size_bytes,
                    depends_on: Vec::new(),
                    payload: c.payload,
                });
            }
        }
        Ok(Some(files))
    }

    fn materialise(&self, w: &WorkRecord, spec: &Resolved, files: &[FileEntry], staged: bool) -> StoreResult<()> {
        let id = &w.work.work_id;
        let coll = |kind, s: &CollectionSpec| Collection {
            collection_id: match kind {
                CollectionKind::Input => ids::input_collection_id(id),
                CollectionKind::Output => ids::output_collection_id(id),
            },
            request_id: w.request_id.clone(),
            work_id: id.clone(),
            scope: s.scope.clone(),
            name: s.name.clone(),
            kind,
            total_contents: 0,
            available_contents: 0,
            processed_contents: 0,
            staged: staged && kind == CollectionKind::Input,
        };
        let input = coll(CollectionKind::Input, &spec.input);
        let output = coll(CollectionKind::Output, &spec.output);
        let now = self.store.now();
        let mut contents = Vec::with_capacity(files.len() * 2);
        for (side, c) in [(&spec.input, &input), (&spec.output, &output)] {
            for (i, f) in files.iter().enumerate() {
                let is_input = c.kind == CollectionKind::Input;
                contents.push(Content {
                    content_id: ids::content_id(&c.collection_id, i),
                    collection_id: c.collection_id.clone(),
                    request_id: w.request_id.clone(),
                    work_id: id.clone(),
                    kind: c.kind,
                    name: f.name.clone(),
                    did: CollectionSpec::did(&side.scope, &side.name, &f.name),
                    size_bytes: f.size_bytes,
                    status: ContentStatus::New,
                    attempt_count: 0,
                    abandoned: false,
                    depends_on: if is_input { f.depends_on.clone() } else { Vec::new() },
                    metrics: BTreeMap::new(),
                    payload: f.payload.clone(),
                    started_at: None,
                    finished_at: None,
                    updated_at: now,
                });
            }
        }
        self.store.put_missing(vec![input, output])?;
        self.store.put_missing(contents)?;
        Ok(())
    }

    /// New -> [Activated, Running, Terminating, Failed] in one record.
    fn fail_new(&self, w: &WorkRecord, error: String) -> StoreResult<bool> {
        tracing::warn!(daemon = "transformer", entity = %w.work.work_id, transition = "New->Failed", %error);
        tolerate(self.store.transition_with::<WorkRecord>(
            &w.work.work_id,
            WorkStatus::New,
            &[
                WorkStatus::Activated,
                WorkStatus::Running,
                WorkStatus::Terminating,
                WorkStatus::Failed,
            ],
            |r| r.error = Some(error),
        ))?;
        Ok(false)
    }

    // ---- availability ----

    fn stage(&mut self) -> StoreResult<()> {
        for status in [WorkStatus::Activated, WorkStatus::Running] {
            for w in self.store.list::<WorkRecord>(Some(status), None)? {
                self.stage_work(&w)?;
            }
        }
        Ok(())
    }

    /// Moves a Work's dependency-free New inputs to Available once the data
    /// manager reports them on disk.
    fn stage_work(&mut self, w: &WorkRecord) -> StoreResult<()> {
        let id = &w.work.work_id;
        let pending = self.store.list_by::<Content>(&format!("pending:{id}"))?;
        if pending.is_empty() {
            return Ok(());
        }
        let coll = self.store.get::<Collection>(&ids::input_collection_id(id))?;
        let now = self.store.now();
        for c in pending {
            if coll.staged {
                let state = self
                    .backends
                    .ddm
                    .lock()
                    .stage_status(&coll.scope, &coll.name, &c.name, now);
                match state {
                    Ok(StageState::OnDisk) => {}
                    Ok(_) => continue,
                    Err(e) => {
                        tracing::warn!(daemon = "transformer", entity = %c.content_id, error = %e, "stage status");
                        continue;
                    }
                }
            }
            self.make_available(&c.content_id)?;
        }
        Ok(())
    }

    fn make_available(&self, cid: &str) -> StoreResult<()> {
        if tolerate(self.store.transition::<Content>(cid, ContentStatus::New, ContentStatus::Available))?
            .is_some()
        {
            tracing::debug!(daemon = "transformer", entity = %cid, transition = "New->Available");
        }
        Ok(())
    }

    // ---- dependencies ----

    /// Reacts to content notifications: dependents of a processed input
    /// are released once all their dependencies are processed.
    fn release_dependents(&mut self) -> StoreResult<()> {
        let (events, cursor) = self.store.audit_since(self.audit_cursor)?;
        self.audit_cursor = cursor;
        for ev in events {
            if ev.kind != Kind::Message || ev.from.is_some() {
                continue;
            }
            let Some(m) = self.store.find::<Message>(&ev.id)? else {
                continue;
            };
            if m.msg_type != MessageType::ContentAvailable {
                continue;
            }
            let status = m.payload.get("status").and_then(|v| v.as_str());
            let kind = m.payload.get("kind").and_then(|v| v.as_str());
            if !matches!(status, Some("Processed") | Some("Failed")) || kind != Some("Input") {
                continue;
            }
            let Some(did) = m.payload.get("did").and_then(|v| v.as_str()) else {
                continue;
            };
            let key = format!("dep:{}:{did}", m.request_id);
            for dependent in self.store.list_by::<Content>(&key)? {
                self.check_deps(&dependent)?;
            }
        }
        self.check_fresh_dependents()
    }

    /// Contents created after their dependencies already settled never see
    /// a notification, so New contents with dependencies of active Works
    /// are checked here too. The check is idempotent.
    fn check_fresh_dependents(&mut self) -> StoreResult<()> {
        for status in [WorkStatus::Activated, WorkStatus::Running] {
            for id in self.store.ids_by::<WorkRecord>(&format!("status:{status}"))? {
                if self.dep_scanned.contains(&id) {
                    continue;
                }
                for c in self.store.list_by::<Content>(&format!("work:{id}:New"))? {
                    if !c.depends_on.is_empty() {
                        self.check_deps(&c)?;
                    }
                }
                self.dep_scanned.insert(id);
            }
        }
        Ok(())
    }

    fn check_deps(&self, c: &Content) -> StoreResult<()> {
        if c.status != ContentStatus::New {
            return Ok(());
        }
        let mut all_done = true;
        let mut broken = None;
        for d in &c.depends_on {
            let upstream = self
                .store
                .list_by::<Content>(&format!("did:{}:{d}", c.request_id))?;
            let inputs: Vec<_> = upstream
                .iter()
                .filter(|u| u.kind == CollectionKind::Input)
                .collect();
            if inputs.iter().any(|u| u.status == ContentStatus::Processed) {
                continue;
            }
            all_done = false;
            if !inputs.is_empty() && inputs.iter().all(|u| u.is_final()) {
                broken = Some(d.clone());
                break;
            }
        }
        if let Some(d) = broken {
            tracing::info!(daemon = "transformer", entity = %c.content_id, dependency = %d, "dependency abandoned");
            tolerate(self.store.transition_with::<Content>(
                &c.content_id,
                ContentStatus::New,
                &[ContentStatus::Available, ContentStatus::Delivered, ContentStatus::Failed],
                |r| {
                    r.abandoned = true;
                    r.metrics.insert("dependency_failed".into(), 1.0);
                },
            ))?;
        } else if all_done {
            self.make_available(&c.content_id)?;
        }
        Ok(())
    }

    // ---- settlement ----

    fn settle(&mut self) -> StoreResult<()> {
        let done = self.store.claim_status::<WorkRecord>(
            WorkStatus::Terminating,
            &self.cfg.worker_id,
            self.cfg.lease,
            self.cfg.batch_size,
        )?;
        for w in done {
            let id = w.work.work_id.clone();
            self.dep_scanned.remove(&id);
            let inputs = self
                .store
                .list::<Content>(None, Some(&ids::input_collection_id(&id)))?;
            let n = inputs.len();
            let processed = inputs
                .iter()
                .filter(|c| c.status == ContentStatus::Processed)
                .count();
            let failed = n - processed;
            let min_loss = inputs
                .iter()
                .filter(|c| c.status == ContentStatus::Processed)
                .filter_map(|c| c.metrics.get("loss").copied())
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))));
            let to = if processed == n {
                WorkStatus::Finished
            } else if processed > 0 {
                WorkStatus::SubFinished
            } else {
                WorkStatus::Failed
            };
            let moved = tolerate(self.store.transition_with::<WorkRecord>(
                &id,
                WorkStatus::Terminating,
                &[to],
                |r| {
                    let m = &mut r.work.output_metrics;
                    m.insert("n_inputs".into(), n as f64);
                    m.insert("n_processed".into(), processed as f64);
                    m.insert("n_failed".into(), failed as f64);
                    if let Some(l) = min_loss {
                        m.insert("min_loss".into(), l);
                    }
                },
            ))?;
            if moved.is_some() {
                tracing::info!(
                    daemon = "transformer",
                    entity = %id,
                    transition = %format!("Terminating->{to}"),
                    processed,
                    failed
                );
            }
            self.store.release::<WorkRecord>(&id, &self.cfg.worker_id)?;
        }
        Ok(())
    }
}
