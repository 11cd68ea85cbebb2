use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde_json::{json, Value};

use super::{bump, tolerate, DaemonConfig, PipelineStats, Transport};
use crate::ids;
use crate::model::WorkStatus;
use crate::store::{
    AuditEvent, Collection, Content, ContentStatus, DeliveryStatus, Kind, Message, MessageType, Request,
    RequestStatus, Store, StoreError, StoreResult, WorkRecord,
};

/// Scope of the generated hyperparameter-point collections.
pub const HPO_SCOPE: &str = "hpo";

/// Turns state changes into consumer notifications and delivers them at
/// least once. Message ids are derived from the change they report, so a
/// replayed feed produces no duplicates in the store.
pub struct Conductor {
    store: Store,
    cfg: DaemonConfig,
    stats: Arc<PipelineStats>,
    transport: Arc<dyn Transport>,
    cursor: u64,
    ack_cursor: usize,
    /// Available transitions seen per content, numbering redeliveries.
    available_seen: HashMap<String, u32>,
    consumers: HashMap<String, String>,
}

impl Conductor {
    pub fn new(store: Store, cfg: DaemonConfig, stats: Arc<PipelineStats>, transport: Arc<dyn Transport>) -> Self {
        Self {
            store,
            cfg,
            stats,
            transport,
            cursor: 0,
            ack_cursor: 0,
            available_seen: HashMap::new(),
            consumers: HashMap::new(),
        }
    }

    pub fn step(&mut self) -> StoreResult<usize> {
        self.generate()?;
        let n = self.deliver()?;
        self.acknowledge()?;
        bump(&self.stats.messages_delivered, n);
        Ok(n)
    }

    fn consumer(&mut self, rid: &str) -> StoreResult<String> {
        if let Some(c) = self.consumers.get(rid) {
            return Ok(c.clone());
        }
        let c = self.store.get::<Request>(rid)?.consumer;
        self.consumers.insert(rid.to_string(), c.clone());
        Ok(c)
    }

    fn message(&mut self, id: String, ty: MessageType, rid: &str, payload: BTreeMap<String, Value>) -> StoreResult<Message> {
        Ok(Message {
            message_id: id,
            msg_type: ty,
            destination: self.consumer(rid)?,
            request_id: rid.to_string(),
            payload,
            delivery_status: DeliveryStatus::Pending,
            created_at: self.store.now(),
        })
    }

    fn generate(&mut self) -> StoreResult<()> {
        let (events, cursor) = self.store.audit_since(self.cursor)?;
        let mut out = Vec::new();
        for ev in &events {
            if let Some(m) = self.from_event(ev)? {
                out.push(m);
            }
        }
        if !out.is_empty() {
            self.store.put_missing(out)?;
        }
        self.cursor = cursor;
        Ok(())
    }

    fn from_event(&mut self, ev: &AuditEvent) -> StoreResult<Option<Message>> {
        match ev.kind {
            Kind::Content => {
                let suffix = match ev.to.as_str() {
                    "Available" => {
                        let k = self.available_seen.entry(ev.id.clone()).or_default();
                        *k += 1;
                        format!("Available:{k}")
                    }
                    "Processed" | "Failed" => ev.to.clone(),
                    _ => return Ok(None),
                };
                let Some(c) = self.store.find::<Content>(&ev.id)? else {
                    return Ok(None);
                };
                if ev.to == "Failed" && !(c.status == ContentStatus::Failed && c.abandoned) {
                    return Ok(None);
                }
                let attempt = if ev.to == "Available" {
                    self.available_seen[&ev.id]
                } else {
                    c.attempt_count
                };
                let payload = BTreeMap::from([
                    ("content_id".to_string(), json!(c.content_id)),
                    ("collection_id".to_string(), json!(c.collection_id)),
                    ("did".to_string(), json!(c.did)),
                    ("status".to_string(), json!(ev.to)),
                    ("attempt".to_string(), json!(attempt)),
                    ("work_id".to_string(), json!(c.work_id)),
                    ("kind".to_string(), json!(format!("{:?}", c.kind))),
                ]);
                let id = format!("{}:{suffix}", c.content_id);
                self.message(id, MessageType::ContentAvailable, &c.request_id, payload)
                    .map(Some)
            }
            Kind::Work => {
                let Some(w) = self.store.find::<WorkRecord>(&ev.id)? else {
                    return Ok(None);
                };
                let to = ev.to.as_str();
                if matches!(to, "Finished" | "SubFinished" | "Failed") {
                    let payload = BTreeMap::from([
                        ("work_id".to_string(), json!(w.work.work_id)),
                        ("template".to_string(), json!(w.work.template_name)),
                        ("status".to_string(), json!(to)),
                        ("metrics".to_string(), json!(w.work.output_metrics)),
                    ]);
                    let id = format!("{}:terminated", w.work.work_id);
                    return self
                        .message(id, MessageType::WorkTerminated, &w.request_id, payload)
                        .map(Some);
                }
                if to == WorkStatus::Activated.as_str() {
                    let coll = self
                        .store
                        .find::<Collection>(&ids::input_collection_id(&w.work.work_id))?;
                    if let Some(coll) = coll.filter(|c| c.scope == HPO_SCOPE) {
                        let payload = BTreeMap::from([
                            ("work_id".to_string(), json!(w.work.work_id)),
                            ("collection_id".to_string(), json!(coll.collection_id)),
                            ("points".to_string(), json!(coll.total_contents)),
                        ]);
                        let id = format!("{}:points", w.work.work_id);
                        return self
                            .message(id, MessageType::HPOPointsReady, &w.request_id, payload)
                            .map(Some);
                    }
                }
                Ok(None)
            }
            Kind::Request => {
                let terminal = RequestStatus::parse(&ev.to).is_some_and(|s| s.is_terminal());
                if !terminal {
                    return Ok(None);
                }
                let payload = BTreeMap::from([
                    ("request_id".to_string(), json!(ev.id)),
                    ("status".to_string(), json!(ev.to)),
                ]);
                let id = format!("{}:done", ev.id);
                self.message(id, MessageType::RequestDone, &ev.id, payload)
                    .map(Some)
            }
            _ => Ok(None),
        }
    }

    fn deliver(&mut self) -> StoreResult<usize> {
        let pending = self.store.claim_status::<Message>(
            DeliveryStatus::Pending,
            &self.cfg.worker_id,
            self.cfg.lease,
            self.cfg.batch_size,
        )?;
        let mut n = 0;
        let mut down = false;
        for m in pending {
            if !down {
                match self.transport.deliver(&m) {
                    Ok(()) => {
                        if tolerate(self.store.transition::<Message>(
                            &m.message_id,
                            DeliveryStatus::Pending,
                            DeliveryStatus::Delivered,
                        ))?
                        .is_some()
                        {
                            n += 1;
                        }
                    }
                    Err(e) => {
                        tracing::warn!(daemon = "conductor", entity = %m.message_id, error = %e, "delivery failed");
                        down = true;
                    }
                }
            }
            self.store.release::<Message>(&m.message_id, &self.cfg.worker_id)?;
        }
        Ok(n)
    }

    fn acknowledge(&mut self) -> StoreResult<()> {
        let (acks, cursor) = self.transport.acks_since(self.ack_cursor);
        for id in acks {
            match self
                .store
                .transition::<Message>(&id, DeliveryStatus::Delivered, DeliveryStatus::Acked)
            {
                Ok(_) => {}
                Err(StoreError::NotFound { .. }) => {}
                Err(e) => {
                    tolerate::<Message>(Err(e))?;
                }
            }
        }
        self.ack_cursor = cursor;
        Ok(())
    }
}
