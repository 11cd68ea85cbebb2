//! Wrappers that make a backend unreachable for a while.

use super::{
    BackendError, DdmBackend, FileEntry, JobInput, PollReport, ProcessingDescriptor, ResolveContext,
    SharedDdm, SharedWfm, StageState, WfmBackend,
};
use crate::clock::Millis;

/// Fails the first `failures` calls (or all calls when `None`), then
/// forwards to `inner`.
pub struct FlakyDdm {
    inner: SharedDdm,
    remaining: Option<u32>,
    pub calls: u32,
}

impl FlakyDdm {
    pub fn failing_first(inner: SharedDdm, failures: u32) -> Self {
        Self {
            inner,
            remaining: Some(failures),
            calls: 0,
        }
    }

    pub fn down(inner: SharedDdm) -> Self {
        Self {
            inner,
            remaining: None,
            calls: 0,
        }
    }

    fn gate(&mut self) -> Result<(), BackendError> {
        self.calls += 1;
        match &mut self.remaining {
            None => Err(BackendError::Unavailable("ddm down".into())),
            Some(0) => Ok(()),
            Some(n) => {
                *n -= 1;
                Err(BackendError::Unavailable("ddm down".into()))
            }
        }
    }
}

impl DdmBackend for FlakyDdm {
    fn resolve_collection(&mut self, scope: &str, name: &str, ctx: &ResolveContext) -> Result<Vec<FileEntry>, BackendError> {
        self.gate()?;
        self.inner.lock().resolve_collection(scope, name, ctx)
    }

    fn stage_status(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<StageState, BackendError> {
        self.gate()?;
        self.inner.lock().stage_status(scope, name, file, now)
    }

    fn release(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<(), BackendError> {
        self.gate()?;
        self.inner.lock().release(scope, name, file, now)
    }

    fn ready_at(&self, did: &str) -> Option<Millis> {
        self.inner.lock().ready_at(did)
    }

    fn next_event_time(&self, now: Millis) -> Option<Millis> {
        self.inner.lock().next_event_time(now)
    }
}

/// Fails selected WFM operations for their first `n` calls.
pub struct FlakyWfm {
    inner: SharedWfm,
    pub submit_failures: u32,
    pub poll_failures: u32,
    pub release_failures: u32,
}

impl FlakyWfm {
    pub fn new(inner: SharedWfm) -> Self {
        Self {
            inner,
            submit_failures: 0,
            poll_failures: 0,
            release_failures: 0,
        }
    }

    fn gate(n: &mut u32, what: &str) -> Result<(), BackendError> {
        if *n > 0 {
            *n -= 1;
            return Err(BackendError::Unavailable(format!("wfm {what} failed")));
        }
        Ok(())
    }
}

impl WfmBackend for FlakyWfm {
    fn submit(&mut self, desc: &ProcessingDescriptor, now: Millis) -> Result<String, BackendError> {
        Self::gate(&mut self.submit_failures, "submit")?;
        self.inner.lock().submit(desc, now)
    }

    fn release(&mut self, external_id: &str, bundles: &[Vec<JobInput>], now: Millis) -> Result<(), BackendError> {
        Self::gate(&mut self.release_failures, "release")?;
        self.inner.lock().release(external_id, bundles, now)
    }

    fn poll(&mut self, external_id: &str, since: u64, now: Millis) -> Result<PollReport, BackendError> {
        Self::gate(&mut self.poll_failures, "poll")?;
        self.inner.lock().poll(external_id, since, now)
    }

    fn kill(&mut self, external_id: &str, now: Millis) -> Result<(), BackendError> {
        self.inner.lock().kill(external_id, now)
    }

    fn next_event_time(&self, now: Millis) -> Option<Millis> {
        self.inner.lock().next_event_time(now)
    }
}
