//! Embedded transactional entity store.
//!
//! Every mutation is one log record holding full entity images, so replay
//! is a plain upsert. A Content write carries its Collection's updated
//! counters in the same record. Leases are data too: they are logged and
//! survive a restart, and they are reclaimable once expired.

mod records;
mod wal;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

pub use records::*;
pub use wal::{AuditEvent, FileLog, LogSink, MemoryLog};
use wal::{Op, WalRecord};

use crate::clock::{Clock, Millis};

/// Default lease duration in milliseconds.
pub const DEFAULT_LEASE_MS: Millis = 60_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: Kind, id: String },
    #[error("{kind} `{id}` already exists")]
    Conflict { kind: Kind, id: String },
    #[error("{kind} `{id}` is {actual}, expected {expected}")]
    StaleTransition {
        kind: Kind,
        id: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("{kind} `{id}`: illegal transition {from} -> {to}")]
    IllegalTransition {
        kind: Kind,
        id: String,
        from: &'static str,
        to: &'static str,
    },
    #[error("lease duration must be positive")]
    InvalidLease,
    #[error("store has crashed")]
    Crashed,
    #[error("log i/o: {0}")]
    Io(String),
    #[error("log corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

pub type StoreResult<T> = Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub worker: String,
    pub expires_at: Millis,
}

/// What a tripped fault takes down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultScope {
    /// The whole store: every handle fails until reopened from the log.
    Process,
    /// Only the faulted handle, as if one daemon was killed.
    Handle,
}

/// Crash after `after_writes` successful commits through the faulted handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    pub after_writes: u64,
    pub scope: FaultScope,
    /// Leave half of the next record in the log.
    pub torn: bool,
}

impl FaultPlan {
    pub fn process(after_writes: u64) -> Self {
        Self {
            after_writes,
            scope: FaultScope::Process,
            torn: false,
        }
    }

    pub fn handle(after_writes: u64) -> Self {
        Self {
            after_writes,
            scope: FaultScope::Handle,
            torn: false,
        }
    }
}

#[derive(Debug)]
struct FaultState {
    plan: FaultPlan,
    writes: AtomicU64,
    tripped: AtomicBool,
}

#[derive(Default)]
struct Table {
    rows: BTreeMap<String, Entity>,
    index: HashMap<String, BTreeSet<String>>,
}

impl Table {
    fn upsert(&mut self, e: Entity) {
        let id = e.id().to_string();
        if let Some(old) = self.rows.get(&id) {
            for k in old.index_keys() {
                if let Some(set) = self.index.get_mut(&k) {
                    set.remove(&id);
                    if set.is_empty() {
                        self.index.remove(&k);
                    }
                }
            }
        }
        for k in e.index_keys() {
            self.index.entry(k).or_default().insert(id.clone());
        }
        self.rows.insert(id, e);
    }

    fn ids(&self, key: &str) -> Box<dyn Iterator<Item = &String> + '_> {
        if key.is_empty() {
            Box::new(self.rows.keys())
        } else {
            match self.index.get(key) {
                Some(set) => Box::new(set.iter()),
                None => Box::new(std::iter::empty()),
            }
        }
    }
}

struct Inner {
    tables: [Table; 6],
    leases: HashMap<(Kind, String), Lease>,
    /// Change feed: one entry per entity image written.
    journal: Vec<(Kind, String)>,
    audit: Vec<AuditEvent>,
    seq: u64,
    sink: Option<Box<dyn LogSink>>,
    crashed: bool,
    next_request: u64,
}

fn slot(kind: Kind) -> usize {
    kind as usize
}

impl Inner {
    fn new(sink: Option<Box<dyn LogSink>>) -> Self {
        Self {
            tables: Default::default(),
            leases: HashMap::new(),
            journal: Vec::new(),
            audit: Vec::new(),
            seq: 0,
            sink,
            crashed: false,
            next_request: 1,
        }
    }

    fn table(&self, kind: Kind) -> &Table {
        &self.tables[slot(kind)]
    }

    fn get<T: Record>(&self, id: &str) -> Option<&T> {
        self.table(T::KIND).rows.get(id).and_then(T::from_entity)
    }

    fn apply(&mut self, rec: WalRecord) {
        for op in rec.ops {
            match op {
                Op::Put { entity } => {
                    let kind = entity.kind();
                    self.journal.push((kind, entity.id().to_string()));
                    if let Entity::Request(r) = &entity {
                        if let Some(n) = r.request_id.strip_prefix('r').and_then(|s| s.parse::<u64>().ok()) {
                            self.next_request = self.next_request.max(n + 1);
                        }
                    }
                    self.tables[slot(kind)].upsert(entity);
                }
                Op::Lease {
                    kind,
                    id,
                    worker,
                    expires_at,
                } => {
                    self.leases.insert((kind, id), Lease { worker, expires_at });
                }
                Op::Unlease { kind, id } => {
                    self.leases.remove(&(kind, id));
                }
            }
        }
        self.audit.extend(rec.audit);
        self.seq = rec.seq;
    }

}

struct Shared {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
}

/// Cheap, cloneable handle to a store.
#[derive(Clone)]
pub struct Store {
    shared: Arc<Shared>,
    fault: Option<Arc<FaultState>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("fault", &self.fault).finish()
    }
}

/// Replaces an earlier image of the same entity in `ops`, or appends.
fn merge_image(ops: &mut Vec<Op>, op: Op) {
    if let Op::Put { entity } = &op {
        let slot = ops.iter().position(|o| {
            matches!(o, Op::Put { entity: e } if e.kind() == entity.kind() && e.id() == entity.id())
        });
        if let Some(i) = slot {
            ops[i] = op;
            return;
        }
    }
    ops.push(op);
}

/// Folds a Content status change into its Collection's counters.
fn fold_counters(coll: &mut Collection, before: Option<&Content>, after: &Content) {
    let flags = |c: &Content| (c.status.counts_available(), c.status == ContentStatus::Processed);
    let (b_av, b_pr) = before.map_or((false, false), flags);
    let (a_av, a_pr) = flags(after);
    if before.is_none() {
        coll.total_contents += 1;
    }
    coll.available_contents = coll.available_contents + a_av as u64 - b_av as u64;
    coll.processed_contents = coll.processed_contents + a_pr as u64 - b_pr as u64;
}

/// The Collection image a Content write implies, if its counters move.
/// `ops` holds earlier images of the same transaction.
fn counters_for<T: Record>(inner: &Inner, before: Option<&T>, after: &T, ops: &[Op]) -> StoreResult<Option<Op>> {
    if T::KIND != Kind::Content {
        return Ok(None);
    }
    let as_content = |r: &T| match r.clone().into_entity() {
        Entity::Content(c) => c,
        _ => unreachable!("content kind"),
    };
    let after = as_content(after);
    let before = before.map(as_content);
    if let Some(b) = &before {
        if b.status.counts_available() == after.status.counts_available()
            && (b.status == ContentStatus::Processed) == (after.status == ContentStatus::Processed)
        {
            return Ok(None);
        }
    }
    let pending = ops.iter().rev().find_map(|op| match op {
        Op::Put {
            entity: Entity::Collection(c),
        } if c.collection_id == after.collection_id => Some(c.clone()),
        _ => None,
    });
    let mut coll = match pending {
        Some(c) => c,
        None => inner
            .get::<Collection>(&after.collection_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound {
                kind: Kind::Collection,
                id: after.collection_id.clone(),
            })?,
    };
    fold_counters(&mut coll, before.as_ref(), &after);
    Ok(Some(Op::Put {
        entity: Entity::Collection(coll),
    }))
}

impl Store {
    /// Volatile store with no log.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::from_inner(Inner::new(None), clock)
    }

    /// Opens a store over `sink`, replaying whatever it already holds.
    pub fn open(mut sink: Box<dyn LogSink>, clock: Arc<dyn Clock>) -> StoreResult<Self> {
        let bytes = sink.read_all().map_err(|e| StoreError::Io(e.to_string()))?;
        let (records, valid_len) =
            wal::decode(&bytes).map_err(|(line, message)| StoreError::Corrupt { line, message })?;
        let mut inner = Inner::new(None);
        for r in records {
            inner.apply(r);
        }
        if valid_len < bytes.len() {
            tracing::warn!(dropped = bytes.len() - valid_len, "discarding torn log tail");
            sink.truncate(valid_len as u64)
                .map_err(|e| StoreError::Io(e.to_string()))?;
        }
        inner.sink = Some(sink);
        Ok(Self::from_inner(inner, clock))
    }

    /// Store logging to a shared in-memory buffer.
    pub fn with_memory_log(clock: Arc<dyn Clock>) -> (Self, MemoryLog) {
        let log = MemoryLog::new();
        let store = Self::open(Box::new(log.clone()), clock).expect("empty log opens");
        (store, log)
    }

    fn from_inner(inner: Inner, clock: Arc<dyn Clock>) -> Self {
        Self {
            shared: Arc::new(Shared {
                inner: Mutex::new(inner),
                clock,
            }),
            fault: None,
        }
    }

    /// A handle sharing this store that crashes per `plan`.
    pub fn with_fault(&self, plan: FaultPlan) -> Self {
        Self {
            shared: self.shared.clone(),
            fault: Some(Arc::new(FaultState {
                plan,
                writes: AtomicU64::new(0),
                tripped: AtomicBool::new(false),
            })),
        }
    }

    /// Simulates a process kill: all handles fail from now on.
    pub fn crash(&self) {
        self.shared.inner.lock().crashed = true;
    }

    pub fn is_crashed(&self) -> bool {
        self.shared.inner.lock().crashed
            || self
                .fault
                .as_ref()
                .is_some_and(|f| f.tripped.load(Ordering::SeqCst))
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.shared.clock.clone()
    }

    pub fn now(&self) -> Millis {
        self.shared.clock.now()
    }

    fn read<R>(&self, f: impl FnOnce(&Inner) -> R) -> StoreResult<R> {
        let g = self.shared.inner.lock();
        if g.crashed || self.fault.as_ref().is_some_and(|f| f.tripped.load(Ordering::SeqCst)) {
            return Err(StoreError::Crashed);
        }
        Ok(f(&g))
    }

    fn write<R>(&self, f: impl FnOnce(&mut Inner, Millis) -> StoreResult<(Vec<Op>, Vec<AuditEvent>, R)>) -> StoreResult<R> {
        let mut g = self.shared.inner.lock();
        if g.crashed {
            return Err(StoreError::Crashed);
        }
        let now = self.shared.clock.now();
        let (ops, mut audit, out) = f(&mut g, now)?;
        if ops.is_empty() {
            return Ok(out);
        }
        let mut torn = false;
        if let Some(fault) = &self.fault {
            if fault.tripped.load(Ordering::SeqCst) {
                return Err(StoreError::Crashed);
            }
            if fault.writes.load(Ordering::SeqCst) >= fault.plan.after_writes {
                fault.tripped.store(true, Ordering::SeqCst);
                if fault.plan.scope == FaultScope::Process {
                    g.crashed = true;
                }
                if !fault.plan.torn {
                    return Err(StoreError::Crashed);
                }
                torn = true;
            }
        }
        let seq = g.seq + 1;
        for a in &mut audit {
            a.seq = seq;
        }
        let rec = WalRecord {
            seq,
            at: now,
            ops,
            audit,
        };
        if let Some(sink) = g.sink.as_mut() {
            let line = wal::encode(&rec);
            if torn {
                let _ = sink.append(&line[..line.len() / 2]);
                return Err(StoreError::Crashed);
            }
            sink.append(&line).map_err(|e| StoreError::Io(e.to_string()))?;
        } else if torn {
            return Err(StoreError::Crashed);
        }
        g.apply(rec);
        if let Some(fault) = &self.fault {
            fault.writes.fetch_add(1, Ordering::SeqCst);
        }
        Ok(out)
    }

    // ---- reads ----

    pub fn get<T: Record>(&self, id: &str) -> StoreResult<T> {
        self.find(id)?.ok_or_else(|| StoreError::NotFound {
            kind: T::KIND,
            id: id.to_string(),
        })
    }

    pub fn find<T: Record>(&self, id: &str) -> StoreResult<Option<T>> {
        self.read(|g| g.get::<T>(id).cloned())
    }

    /// All entities under index `key` (every entity when `key` is empty),
    /// in id order.
    pub fn list_by<T: Record>(&self, key: &str) -> StoreResult<Vec<T>> {
        self.read(|g| {
            let t = g.table(T::KIND);
            t.ids(key)
                .filter_map(|id| t.rows.get(id).and_then(T::from_entity).cloned())
                .collect()
        })
    }

    pub fn ids_by<T: Record>(&self, key: &str) -> StoreResult<Vec<String>> {
        self.read(|g| g.table(T::KIND).ids(key).cloned().collect())
    }

    pub fn count_by<T: Record>(&self, key: &str) -> StoreResult<usize> {
        self.read(|g| {
            let t = g.table(T::KIND);
            if key.is_empty() {
                t.rows.len()
            } else {
                t.index.get(key).map_or(0, |s| s.len())
            }
        })
    }

    /// Filter by status and/or owner id.
    pub fn list<T: Record>(&self, status: Option<T::Status>, owner: Option<&str>) -> StoreResult<Vec<T>> {
        let key = match (status, owner) {
            (Some(s), _) => format!("status:{}", s.name()),
            (None, Some(o)) => format!("owner:{o}"),
            (None, None) => String::new(),
        };
        let mut out = self.list_by::<T>(&key)?;
        if let (Some(_), Some(o)) = (status, owner) {
            out.retain(|r| r.owner() == Some(o));
        }
        Ok(out)
    }

    /// Entities under index `key` with id strictly greater than `after`,
    /// at most `limit` of them.
    pub fn page_by<T: Record>(&self, key: &str, after: Option<&str>, limit: usize) -> StoreResult<Vec<T>> {
        self.read(|g| {
            let t = g.table(T::KIND);
            t.ids(key)
                .filter(|id| after.is_none_or(|a| id.as_str() > a))
                .take(limit)
                .filter_map(|id| t.rows.get(id).and_then(T::from_entity).cloned())
                .collect()
        })
    }

    pub fn lease_of<T: Record>(&self, id: &str) -> StoreResult<Option<Lease>> {
        self.read(|g| g.leases.get(&(T::KIND, id.to_string())).cloned())
    }

    /// Number of entity images written so far; stable iff nothing changed.
    pub fn write_seq(&self) -> u64 {
        self.shared.inner.lock().journal.len() as u64
    }

    /// Entities written at or after position `cursor` of the change feed,
    /// with the cursor to resume from. Repeated writes are coalesced.
    pub fn changes_since(&self, cursor: u64) -> StoreResult<(Vec<(Kind, String)>, u64)> {
        self.read(|g| {
            let start = (cursor as usize).min(g.journal.len());
            let mut seen = BTreeSet::new();
            let out = g.journal[start..]
                .iter()
                .filter(|e| seen.insert((*e).clone()))
                .cloned()
                .collect();
            (out, g.journal.len() as u64)
        })
    }

    /// Audit events from position `cursor` on, with the cursor to resume from.
    pub fn audit_since(&self, cursor: u64) -> StoreResult<(Vec<AuditEvent>, u64)> {
        self.read(|g| {
            let start = (cursor as usize).min(g.audit.len());
            (g.audit[start..].to_vec(), g.audit.len() as u64)
        })
    }

    pub fn audit(&self) -> StoreResult<Vec<AuditEvent>> {
        self.read(|g| g.audit.clone())
    }

    pub fn audit_of(&self, kind: Kind, id: &str) -> StoreResult<Vec<AuditEvent>> {
        self.read(|g| {
            g.audit
                .iter()
                .filter(|a| a.kind == kind && a.id == id)
                .cloned()
                .collect()
        })
    }

    /// Earliest live lease expiry after now.
    pub fn next_lease_expiry(&self) -> Option<Millis> {
        let now = self.now();
        let g = self.shared.inner.lock();
        g.leases.values().map(|l| l.expires_at).filter(|t| *t > now).min()
    }

    /// Newline-delimited canonical records of one table, in id order.
    pub fn export(&self, kind: Kind) -> StoreResult<String> {
        self.read(|g| {
            let mut out = String::new();
            for e in g.table(kind).rows.values() {
                let v = serde_json::to_value(e).expect("entity serializes");
                out.push_str(&v["value"].to_string());
                out.push('\n');
            }
            out
        })
    }

    // ---- writes ----

    /// Inserts a new entity. Content inserts bump their Collection's counters.
    pub fn put<T: Record>(&self, rec: T) -> StoreResult<T> {
        let n = self.put_batch(vec![rec.clone()], false)?;
        debug_assert_eq!(n, 1);
        Ok(rec)
    }

    /// Inserts every record whose id is absent, atomically; returns how many
    /// were inserted. Replaying the same batch is a no-op.
    pub fn put_missing<T: Record>(&self, recs: Vec<T>) -> StoreResult<usize> {
        self.put_batch(recs, true)
    }

    fn put_batch<T: Record>(&self, recs: Vec<T>, skip_existing: bool) -> StoreResult<usize> {
        self.write(|g, now| {
            let mut ops = Vec::new();
            let mut audit = Vec::new();
            let mut fresh = BTreeSet::new();
            for mut rec in recs {
                let id = rec.id().to_string();
                if g.get::<T>(&id).is_some() || !fresh.insert(id.clone()) {
                    if skip_existing {
                        continue;
                    }
                    return Err(StoreError::Conflict { kind: T::KIND, id });
                }
                rec.touch(now);
                let counters = counters_for::<T>(g, None, &rec, &ops)?;
                audit.push(AuditEvent {
                    seq: 0,
                    at: now,
                    kind: T::KIND,
                    id,
                    from: None,
                    to: rec.status().name().to_string(),
                });
                ops.push(Op::Put {
                    entity: rec.into_entity(),
                });
                if let Some(c) = counters {
                    merge_image(&mut ops, c);
                }
            }
            let n = audit.len();
            Ok((ops, audit, n))
        })
    }

    /// Allocates the next request id and inserts the request built from it.
    pub fn insert_request(&self, build: impl FnOnce(String) -> Request) -> StoreResult<Request> {
        self.write(|g, now| {
            let id = format!("r{:06}", g.next_request);
            let mut r = build(id.clone());
            r.request_id = id.clone();
            r.touch(now);
            let audit = vec![AuditEvent {
                seq: 0,
                at: now,
                kind: Kind::Request,
                id,
                from: None,
                to: r.status.name().to_string(),
            }];
            Ok((
                vec![Op::Put {
                    entity: r.clone().into_entity(),
                }],
                audit,
                r,
            ))
        })
    }

    /// Like [`Store::insert_request`], but when the built request carries an
    /// idempotency key already used by the same requester, nothing is
    /// written and the earlier request is returned with `false`.
    pub fn insert_request_once(&self, build: impl FnOnce(String) -> Request) -> StoreResult<(Request, bool)> {
        self.write(|g, now| {
            let id = format!("r{:06}", g.next_request);
            let mut r = build(id.clone());
            if let Some(k) = &r.idempotency_key {
                let t = g.table(Kind::Request);
                let key = format!("idem:{}:{k}", r.requester);
                if let Some(prev) = t.ids(&key).next().and_then(|i| t.rows.get(i)).and_then(Request::from_entity) {
                    return Ok((Vec::new(), Vec::new(), (prev.clone(), false)));
                }
            }
            r.request_id = id.clone();
            r.touch(now);
            let audit = vec![AuditEvent {
                seq: 0,
                at: now,
                kind: Kind::Request,
                id,
                from: None,
                to: r.status.name().to_string(),
            }];
            Ok((vec![Op::Put { entity: r.clone().into_entity() }], audit, (r, true)))
        })
    }

    /// Atomic compare-and-set of one legal edge.
    pub fn transition<T: Record>(&self, id: &str, from: T::Status, to: T::Status) -> StoreResult<T> {
        self.transition_with::<T>(id, from, &[to], |_| {})
    }

    /// Compare-and-set walking `path` edge by edge from `from`, then applying
    /// `f`. All edges and the patch commit as one record.
    pub fn transition_with<T: Record>(
        &self,
        id: &str,
        from: T::Status,
        path: &[T::Status],
        f: impl FnOnce(&mut T),
    ) -> StoreResult<T> {
        self.write(|g, now| {
            let before = g.get::<T>(id).cloned().ok_or_else(|| StoreError::NotFound {
                kind: T::KIND,
                id: id.to_string(),
            })?;
            if before.status() != from {
                return Err(StoreError::StaleTransition {
                    kind: T::KIND,
                    id: id.to_string(),
                    expected: from.name(),
                    actual: before.status().name(),
                });
            }
            let mut rec = before.clone();
            let mut audit = Vec::new();
            let mut cur = from;
            for &to in path {
                if !cur.can_transition(to) {
                    return Err(StoreError::IllegalTransition {
                        kind: T::KIND,
                        id: id.to_string(),
                        from: cur.name(),
                        to: to.name(),
                    });
                }
                rec.set_status(to);
                rec.on_transition(cur, to, now);
                audit.push(AuditEvent {
                    seq: 0,
                    at: now,
                    kind: T::KIND,
                    id: id.to_string(),
                    from: Some(cur.name().to_string()),
                    to: to.name().to_string(),
                });
                cur = to;
            }
            f(&mut rec);
            rec.set_status(cur);
            rec.touch(now);
            let mut ops = vec![Op::Put {
                entity: rec.clone().into_entity(),
            }];
            ops.extend(counters_for::<T>(g, Some(&before), &rec, &ops)?);
            Ok((ops, audit, rec))
        })
    }

    /// Changes fields other than status.
    pub fn patch<T: Record>(&self, id: &str, f: impl FnOnce(&mut T)) -> StoreResult<T> {
        let cur = self.get::<T>(id)?;
        self.transition_with::<T>(id, cur.status(), &[], f)
    }

    // ---- leases ----

    /// Leases up to `limit` entities under index `key` to `worker`, skipping
    /// any under another worker's live lease. Leases already held by
    /// `worker` are renewed only past their half-life.
    pub fn claim<T: Record>(&self, key: &str, worker: &str, lease_ms: Millis, limit: usize) -> StoreResult<Vec<T>> {
        if lease_ms == 0 {
            return Err(StoreError::InvalidLease);
        }
        self.write(|g, now| {
            let t = g.table(T::KIND);
            let mut ops = Vec::new();
            let mut out = Vec::new();
            for id in t.ids(key) {
                if out.len() >= limit {
                    break;
                }
                let lease = g.leases.get(&(T::KIND, id.clone()));
                match lease {
                    Some(l) if l.expires_at > now && l.worker != worker => continue,
                    Some(l) if l.worker == worker && l.expires_at >= now + lease_ms / 2 => {}
                    _ => ops.push(Op::Lease {
                        kind: T::KIND,
                        id: id.clone(),
                        worker: worker.to_string(),
                        expires_at: now + lease_ms,
                    }),
                }
                if let Some(r) = t.rows.get(id).and_then(T::from_entity) {
                    out.push(r.clone());
                }
            }
            Ok((ops, Vec::new(), out))
        })
    }

    pub fn claim_status<T: Record>(&self, status: T::Status, worker: &str, lease_ms: Millis, limit: usize) -> StoreResult<Vec<T>> {
        self.claim::<T>(&format!("status:{}", status.name()), worker, lease_ms, limit)
    }

    /// Drops `worker`'s lease on one entity.
    pub fn release<T: Record>(&self, id: &str, worker: &str) -> StoreResult<()> {
        self.write(|g, _| {
            let held = g
                .leases
                .get(&(T::KIND, id.to_string()))
                .is_some_and(|l| l.worker == worker);
            let ops = if held {
                vec![Op::Unlease {
                    kind: T::KIND,
                    id: id.to_string(),
                }]
            } else {
                Vec::new()
            };
            Ok((ops, Vec::new(), ()))
        })
    }

    /// Drops every lease `worker` holds; returns how many.
    pub fn release_all(&self, worker: &str) -> StoreResult<usize> {
        self.write(|g, _| {
            let mut held: Vec<_> = g
                .leases
                .iter()
                .filter(|(_, l)| l.worker == worker)
                .map(|((k, id), _)| (*k, id.clone()))
                .collect();
            held.sort();
            let n = held.len();
            let ops = held
                .into_iter()
                .map(|(kind, id)| Op::Unlease { kind, id })
                .collect();
            Ok((ops, Vec::new(), n))
        })
    }
}
