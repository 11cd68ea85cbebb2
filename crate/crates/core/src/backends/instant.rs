//! Backends where everything is available at once.

use std::collections::{BTreeMap, HashMap};

use super::{
    BackendError, ContentReport, DdmBackend, FileEntry, JobInput, JobOutcome, PollReport,
    ProcessingDescriptor, ResolveContext, StageState, WfmBackend,
};
use crate::clock::Millis;

/// Datasets fully on disk from t0.
#[derive(Debug, Clone, Default)]
pub struct InstantDdm {
    datasets: BTreeMap<(String, String), Vec<FileEntry>>,
    released: BTreeMap<String, Millis>,
}

impl InstantDdm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dataset(mut self, scope: &str, name: &str, files: Vec<FileEntry>) -> Self {
        self.datasets
            .insert((scope.to_string(), name.to_string()), files);
        self
    }

    pub fn released(&self) -> &BTreeMap<String, Millis> {
        &self.released
    }
}

impl DdmBackend for InstantDdm {
    fn resolve_collection(&mut self, scope: &str, name: &str, _ctx: &ResolveContext) -> Result<Vec<FileEntry>, BackendError> {
        self.datasets
            .get(&(scope.to_string(), name.to_string()))
            .cloned()
            .ok_or_else(|| BackendError::UnknownDataset {
                scope: scope.to_string(),
                name: name.to_string(),
            })
    }

    fn stage_status(&mut self, _scope: &str, _name: &str, _file: &str, _now: Millis) -> Result<StageState, BackendError> {
        Ok(StageState::OnDisk)
    }

    fn release(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<(), BackendError> {
        self.released
            .entry(format!("{scope}:{name}/{file}"))
            .or_insert(now);
        Ok(())
    }
}

/// Processing-level metrics reported by a finished processing, as a
/// function of its descriptor. Scripts model decision Works.
pub type MetricScript = Box<dyn FnMut(&ProcessingDescriptor) -> BTreeMap<String, f64> + Send>;

#[derive(Default)]
struct InstantProc {
    contents: BTreeMap<String, ContentReport>,
    changes: Vec<String>,
    total_inputs: usize,
    metrics: BTreeMap<String, f64>,
    killed: bool,
}

/// Runs every job to success, `duration` after release, never failing.
#[derive(Default)]
pub struct InstantWfm {
    duration: Millis,
    script: Option<MetricScript>,
    procs: Vec<InstantProc>,
    by_processing: HashMap<String, usize>,
    /// Completion instants still ahead, for the event driver.
    pending: Vec<Millis>,
}

impl std::fmt::Debug for InstantWfm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstantWfm")
            .field("duration", &self.duration)
            .field("procs", &self.procs.len())
            .finish()
    }
}

impl InstantWfm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Jobs finish `duration` ms after release.
    pub fn with_duration(mut self, duration: Millis) -> Self {
        self.duration = duration;
        self
    }

    pub fn with_script(mut self, script: MetricScript) -> Self {
        self.script = Some(script);
        self
    }

    fn index(&self, external_id: &str) -> Result<usize, BackendError> {
        external_id
            .strip_prefix("iw-")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|i| *i < self.procs.len())
            .ok_or_else(|| BackendError::UnknownHandle(external_id.to_string()))
    }
}

impl WfmBackend for InstantWfm {
    fn submit(&mut self, desc: &ProcessingDescriptor, _now: Millis) -> Result<String, BackendError> {
        if let Some(i) = self.by_processing.get(&desc.processing_id) {
            return Ok(format!("iw-{i}"));
        }
        let metrics = self.script.as_mut().map(|s| s(desc)).unwrap_or_default();
        let i = self.procs.len();
        self.procs.push(InstantProc {
            total_inputs: desc.total_inputs,
            metrics,
            ..Default::default()
        });
        self.by_processing.insert(desc.processing_id.clone(), i);
        Ok(format!("iw-{i}"))
    }

    fn release(&mut self, external_id: &str, bundles: &[Vec<JobInput>], now: Millis) -> Result<(), BackendError> {
        let i = self.index(external_id)?;
        let end = now + self.duration;
        let p = &mut self.procs[i];
        for input in bundles.iter().flatten() {
            if p.contents.contains_key(&input.content_id) {
                continue;
            }
            p.contents.insert(
                input.content_id.clone(),
                ContentReport {
                    content_id: input.content_id.clone(),
                    attempts: 1,
                    outcome: JobOutcome::Processed,
                    started_at: Some(now),
                    finished_at: Some(end),
                    metrics: BTreeMap::new(),
                },
            );
            p.changes.push(input.content_id.clone());
            if self.duration > 0 {
                self.pending.push(end);
            }
        }
        Ok(())
    }

    fn poll(&mut self, external_id: &str, since: u64, now: Millis) -> Result<PollReport, BackendError> {
        let i = self.index(external_id)?;
        self.pending.retain(|t| *t > now);
        let p = &self.procs[i];
        // A content is visible once its completion instant has passed.
        let mut entries = Vec::new();
        let mut cursor = since as usize;
        for (k, id) in p.changes.iter().enumerate().skip(since as usize) {
            let r = &p.contents[id];
            if r.finished_at.is_some_and(|t| t > now) {
                break;
            }
            entries.push(r.clone());
            cursor = k + 1;
        }
        let done = p.contents.values().filter(|r| r.finished_at.is_some_and(|t| t <= now)).count();
        Ok(PollReport {
            entries,
            cursor: cursor as u64,
            terminal: p.killed || (p.total_inputs > 0 && done >= p.total_inputs),
            metrics: p.metrics.clone(),
        })
    }

    fn kill(&mut self, external_id: &str, _now: Millis) -> Result<(), BackendError> {
        let i = self.index(external_id)?;
        self.procs[i].killed = true;
        Ok(())
    }

    fn next_event_time(&self, now: Millis) -> Option<Millis> {
        self.pending.iter().copied().filter(|t| *t > now).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(id: &str, n: usize) -> ProcessingDescriptor {
        ProcessingDescriptor {
            processing_id: id.into(),
            work_id: "w".into(),
            request_id: "r".into(),
            template: "t".into(),
            executable: String::new(),
            bindings: BTreeMap::new(),
            generation: 3,
            total_inputs: n,
            input_scope: "s".into(),
            input_name: "d".into(),
        }
    }

    fn job(id: &str) -> Vec<JobInput> {
        vec![JobInput {
            content_id: id.into(),
            did: format!("s:d/{id}"),
            size_bytes: 0,
            payload: None,
        }]
    }

    #[test]
    fn everything_completes_once() {
        let mut w = InstantWfm::new();
        let ext = w.submit(&desc("p", 2), 0).unwrap();
        w.release(&ext, &[job("a"), job("b"), job("a")], 0).unwrap();
        let r = w.poll(&ext, 0, 0).unwrap();
        assert_eq!(r.entries.len(), 2);
        assert!(r.terminal);
        assert!(r.entries.iter().all(|e| e.attempts == 1));
        assert!(w.poll(&ext, r.cursor, 99).unwrap().terminal);
    }

    #[test]
    fn duration_delays_visibility() {
        let mut w = InstantWfm::new().with_duration(5);
        let ext = w.submit(&desc("p", 1), 0).unwrap();
        w.release(&ext, &[job("a")], 10).unwrap();
        assert_eq!(w.next_event_time(10), Some(15));
        assert!(w.poll(&ext, 0, 14).unwrap().entries.is_empty());
        assert_eq!(w.poll(&ext, 0, 15).unwrap().entries.len(), 1);
    }

    #[test]
    fn script_sets_processing_metrics() {
        let mut w = InstantWfm::new().with_script(Box::new(|d| {
            BTreeMap::from([("generation".to_string(), d.generation as f64)])
        }));
        let ext = w.submit(&desc("p", 1), 0).unwrap();
        assert_eq!(w.poll(&ext, 0, 0).unwrap().metrics["generation"], 3.0);
    }
}
