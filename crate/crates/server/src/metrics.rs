//! Counters for `GET /metrics`, folded incrementally from the audit log.
//! Each counts entries into one status, so all are non-decreasing.

use std::collections::BTreeMap;
use std::fmt::Write;

use dds_core::model::WorkStatus;
use dds_core::pipeline::PipelineStats;
use dds_core::store::{
    AuditEvent, CollectionState, ContentStatus, DeliveryStatus, Kind, Lifecycle, ProcessingStatus, RequestStatus, Store,
    StoreResult,
};

fn statuses(kind: Kind) -> Vec<&'static str> {
    fn names<S: Lifecycle + Copy>(all: &[S]) -> Vec<&'static str> {
        all.iter().map(|s| s.name()).collect()
    }
    match kind {
        Kind::Request => names(RequestStatus::ALL),
        Kind::Work => names(&WorkStatus::ALL),
        Kind::Collection => names(CollectionState::ALL),
        Kind::Content => names(ContentStatus::ALL),
        Kind::Processing => names(ProcessingStatus::ALL),
        Kind::Message => names(DeliveryStatus::ALL),
    }
}

fn metric_name(kind: Kind, status: &str) -> String {
    let k = match kind {
        Kind::Request => "requests",
        Kind::Work => "works",
        Kind::Collection => "collections",
        Kind::Content => "contents",
        Kind::Processing => "processings",
        Kind::Message => "messages",
    };
    format!("{k}_{}", status.to_ascii_lowercase())
}

#[derive(Debug)]
pub struct AuditCounters {
    cursor: u64,
    counts: BTreeMap<String, u64>,
}

impl Default for AuditCounters {
    fn default() -> Self {
        let counts = Kind::ALL
            .iter()
            .flat_map(|&k| statuses(k).into_iter().map(move |s| (metric_name(k, s), 0)))
            .collect();
        Self { cursor: 0, counts }
    }
}

impl AuditCounters {
    pub fn fold(&mut self, events: &[AuditEvent]) {
        for e in events {
            *self.counts.entry(metric_name(e.kind, &e.to)).or_default() += 1;
        }
    }

    pub fn refresh(&mut self, store: &Store) -> StoreResult<()> {
        let (events, cursor) = store.audit_since(self.cursor)?;
        self.fold(&events);
        self.cursor = cursor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.counts.get(name).copied()
    }

    /// `name value` lines; daemon counters are prefixed `daemon_` and read
    /// 0 when no daemons are hosted here.
    pub fn render(&self, stats: Option<&PipelineStats>) -> String {
        let mut out = String::new();
        for (k, v) in &self.counts {
            let _ = writeln!(out, "{k} {v}");
        }
        let daemon = stats.map(PipelineStats::snapshot).unwrap_or_else(|| {
            PipelineStats::default()
                .snapshot()
                .into_iter()
                .map(|(k, _)| (k, 0))
                .collect()
        });
        for (k, v) in daemon {
            let _ = writeln!(out, "daemon_{k} {v}");
        }
        out
    }
}

/// Parses a `name value` dump back into a map.
pub fn parse(text: &str) -> BTreeMap<String, u64> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once(' ')?;
            Some((k.to_string(), v.trim().parse().ok()?))
        })
        .collect()
}
