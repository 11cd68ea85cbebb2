//! Persistent entity records and their lifecycles.

use std::collections::BTreeMap;
use std::fmt::{self, Debug};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::model::{Suppressed, ValidationReport, Work, WorkStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Request,
    Work,
    Collection,
    Content,
    Processing,
    Message,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Request,
        Kind::Work,
        Kind::Collection,
        Kind::Content,
        Kind::Processing,
        Kind::Message,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Request => "request",
            Kind::Work => "work",
            Kind::Collection => "collection",
            Kind::Content => "content",
            Kind::Processing => "processing",
            Kind::Message => "message",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A status enum with a fixed set of legal edges.
pub trait Lifecycle: Copy + Eq + Debug + Send + Sync + 'static {
    fn can_transition(self, to: Self) -> bool;
    fn name(self) -> &'static str;
}

/// A stored entity.
pub trait Record: Clone + Debug + Serialize + DeserializeOwned + Send + Sync + 'static {
    type Status: Lifecycle;
    const KIND: Kind;

    fn id(&self) -> &str;
    fn status(&self) -> Self::Status;
    fn set_status(&mut self, s: Self::Status);
    /// Owning entity id, indexed as `owner:<id>`.
    fn owner(&self) -> Option<&str>;
    /// Additional secondary index keys.
    fn extra_keys(&self) -> Vec<String> {
        Vec::new()
    }
    /// Side effects of walking one edge, applied by the store.
    fn on_transition(&mut self, _from: Self::Status, _to: Self::Status, _now: Millis) {}
    fn touch(&mut self, _now: Millis) {}

    fn into_entity(self) -> Entity;
    fn from_entity(e: &Entity) -> Option<&Self>;

    fn index_keys(&self) -> Vec<String> {
        let mut keys = vec![format!("status:{}", self.status().name())];
        if let Some(o) = self.owner() {
            keys.push(format!("owner:{o}"));
        }
        keys.extend(self.extra_keys());
        keys
    }
}

macro_rules! lifecycle {
    ($ty:ident { $($variant:ident),+ $(,)? } edges { $(($a:ident, $b:ident)),* $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $ty {
            $($variant),+
        }

        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn parse(s: &str) -> Option<$ty> {
                match s {
                    $(stringify!($variant) => Some($ty::$variant),)+
                    _ => None,
                }
            }
        }

        impl Lifecycle for $ty {
            fn can_transition(self, to: Self) -> bool {
                #[allow(unused_imports)]
                use $ty::*;
                $(if (self, to) == ($a, $b) {
                    return true;
                })*
                let _ = to;
                false
            }

            fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => stringify!($variant)),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

lifecycle!(RequestStatus { New, Transforming, Finished, SubFinished, Failed }
    edges { (New, Transforming), (Transforming, Finished), (Transforming, SubFinished), (Transforming, Failed) });

lifecycle!(ContentStatus { New, Available, Delivered, Processed, Failed }
    edges { (New, Available), (Available, Delivered), (Delivered, Processed), (Delivered, Failed), (Failed, Available) });

lifecycle!(ProcessingStatus { New, Submitted, Running, Finished, Failed }
    edges {
        (New, Submitted), (New, Failed),
        (Submitted, Running), (Submitted, Finished), (Submitted, Failed),
        (Running, Finished), (Running, Failed),
    });

lifecycle!(DeliveryStatus { Pending, Delivered, Acked }
    edges { (Pending, Delivered), (Delivered, Acked) });

// Collections carry counters, not a lifecycle.
lifecycle!(CollectionState { Open } edges {});

impl RequestStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestStatus::Finished | RequestStatus::SubFinished | RequestStatus::Failed
        )
    }
}

impl ContentStatus {
    pub fn counts_available(self) -> bool {
        matches!(
            self,
            ContentStatus::Available | ContentStatus::Delivered | ContentStatus::Processed
        )
    }
}

impl ProcessingStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, ProcessingStatus::Finished | ProcessingStatus::Failed)
    }
}

impl Lifecycle for WorkStatus {
    fn can_transition(self, to: Self) -> bool {
        WorkStatus::can_transition(self, to)
    }

    fn name(self) -> &'static str {
        self.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub requester: String,
    /// Canonical JSON of the submitted workflow.
    pub workflow: String,
    pub consumer: String,
    pub status: RequestStatus,
    pub created_at: Millis,
    pub updated_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_digest: Option<String>,
}

impl Record for Request {
    type Status = RequestStatus;
    const KIND: Kind = Kind::Request;

    fn id(&self) -> &str {
        &self.request_id
    }
    fn status(&self) -> RequestStatus {
        self.status
    }
    fn set_status(&mut self, s: RequestStatus) {
        self.status = s;
    }
    fn owner(&self) -> Option<&str> {
        None
    }
    fn extra_keys(&self) -> Vec<String> {
        let mut keys = vec![format!("requester:{}", self.requester)];
        if let Some(k) = &self.idempotency_key {
            keys.push(format!("idem:{}:{k}", self.requester));
        }
        keys
    }
    fn touch(&mut self, now: Millis) {
        self.updated_at = now;
    }
    fn into_entity(self) -> Entity {
        Entity::Request(self)
    }
    fn from_entity(e: &Entity) -> Option<&Self> {
        match e {
            Entity::Request(r) => Some(r),
            _ => None,
        }
    }
}

/// A Work plus the pipeline bookkeeping around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkRecord {
    pub work: Work,
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Set once the Marshaller has evaluated this Work's branches.
    #[serde(default)]
    pub evaluated: bool,
    /// Activation-triggered branches still to be evaluated. Termination
    /// branches wait for these.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub activation_pending: bool,
    #[serde(default)]
    pub ddm_failures: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed: Vec<Suppressed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: Millis,
    pub updated_at: Millis,
}

impl WorkRecord {
    pub fn new(work: Work, request_id: &str, parent: Option<&str>, now: Millis) -> Self {
        Self {
            work,
            request_id: request_id.to_string(),
            parent: parent.map(str::to_string),
            evaluated: false,
            activation_pending: false,
            ddm_failures: 0,
            suppressed: Vec::new(),
            error: None,
            created_at: now,
            updated_at: now,
        }
    }
}

impl Record for WorkRecord {
    type Status = WorkStatus;
    const KIND: Kind = Kind::Work;

    fn id(&self) -> &str {
        &self.work.work_id
    }
    fn status(&self) -> WorkStatus {
        self.work.status
    }
    fn set_status(&mut self, s: WorkStatus) {
        self.work.status = s;
    }
    fn owner(&self) -> Option<&str> {
        Some(&self.request_id)
    }
    fn extra_keys(&self) -> Vec<String> {
        let mut keys = vec![format!(
            "template:{}:{}",
            self.request_id, self.work.template_name
        )];
        if let Some(p) = &self.parent {
            keys.push(format!("parent:{p}"));
        }
        if self.activation_pending && self.work.status != WorkStatus::New {
            keys.push("activated".to_string());
        } else if self.work.status.is_terminal() && !self.evaluated {
            keys.push("unevaluated".to_string());
        }
        keys
    }
    fn touch(&mut self, now: Millis) {
        self.updated_at = now;
    }
    fn into_entity(self) -> Entity {
        Entity::Work(self)
    }
    fn from_entity(e: &Entity) -> Option<&Self> {
        match e {
            Entity::Work(w) => Some(w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollectionKind {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collection {
    pub collection_id: String,
    pub request_id: String,
    pub work_id: String,
    pub scope: String,
    pub name: String,
    pub kind: CollectionKind,
    pub total_contents: u64,
    pub available_contents: u64,
    pub processed_contents: u64,
    /// Contents wait for the data manager to stage them before release.
    #[serde(default)]
    pub staged: bool,
}

impl Record for Collection {
    type Status = CollectionState;
    const KIND: Kind = Kind::Collection;

    fn id(&self) -> &str {
        &self.collection_id
    }
    fn status(&self) -> CollectionState {
        CollectionState::Open
    }
    fn set_status(&mut self, _s: CollectionState) {}
    fn owner(&self) -> Option<&str> {
        Some(&self.work_id)
    }
    fn extra_keys(&self) -> Vec<String> {
        vec![
            format!("request:{}", self.request_id),
            format!(
                "dataset:{}:{}:{}:{:?}",
                self.request_id, self.scope, self.name, self.kind
            ),
        ]
    }
    fn into_entity(self) -> Entity {
        Entity::Collection(self)
    }
    fn from_entity(e: &Entity) -> Option<&Self> {
        match e {
            Entity::Collection(c) => Some(c),
            _ => None,
        }
    }
}

/// One file (or job, or hyperparameter point) of a collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Content {
    pub content_id: String,
    pub collection_id: String,
    pub request_id: String,
    pub work_id: String,
    pub kind: CollectionKind,
    pub name: String,
    /// `scope:name/file` of this content.
    pub did: String,
    pub size_bytes: u64,
    pub status: ContentStatus,
    pub attempt_count: u32,
    /// Terminal failure: no further attempts will be made.
    #[serde(default)]
    pub abandoned: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<Millis>,
    pub updated_at: Millis,
}

impl Content {
    /// Processed, or failed with no retries left.
    pub fn is_final(&self) -> bool {
        self.status == ContentStatus::Processed
            || (self.status == ContentStatus::Failed && self.abandoned)
    }
}

impl Record for Content {
    type Status = ContentStatus;
    const KIND: Kind = Kind::Content;

    fn id(&self) -> &str {
        &self.content_id
    }
    fn status(&self) -> ContentStatus {
        self.status
    }
    fn set_status(&mut self, s: ContentStatus) {
        self.status = s;
    }
    fn owner(&self) -> Option<&str> {
        Some(&self.collection_id)
    }
    fn extra_keys(&self) -> Vec<String> {
        // Input and output contents of a Work are indexed apart so that
        // scans over pending inputs never touch outputs.
        let side = match self.kind {
            CollectionKind::Input => "work",
            CollectionKind::Output => "out",
        };
        let mut keys = vec![
            format!("{side}:{}:{}", self.work_id, self.status.name()),
            format!("did:{}:{}", self.request_id, self.did),
        ];
        if self.kind == CollectionKind::Input
            && self.status == ContentStatus::New
            && self.depends_on.is_empty()
        {
            keys.push(format!("pending:{}", self.work_id));
        }
        for d in &self.depends_on {
            keys.push(format!("dep:{}:{d}", self.request_id));
        }
        keys
    }
    fn on_transition(&mut self, from: ContentStatus, to: ContentStatus, _now: Millis) {
        match (from, to) {
            (ContentStatus::New, ContentStatus::Available) => {
                self.attempt_count = self.attempt_count.max(1)
            }
            (ContentStatus::Failed, ContentStatus::Available) => self.attempt_count += 1,
            _ => {}
        }
    }
    fn touch(&mut self, now: Millis) {
        self.updated_at = now;
    }
    fn into_entity(self) -> Entity {
        Entity::Content(self)
    }
    fn from_entity(e: &Entity) -> Option<&Self> {
        match e {
            Entity::Content(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Processing {
    pub processing_id: String,
    pub work_id: String,
    pub request_id: String,
    /// Backend handle; empty until submitted.
    #[serde(default)]
    pub external_id: String,
    pub status: ProcessingStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polled_at: Option<Millis>,
    #[serde(default)]
    pub poll_cursor: u64,
    #[serde(default)]
    pub submit_attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Record for Processing {
    type Status = ProcessingStatus;
    const KIND: Kind = Kind::Processing;

    fn id(&self) -> &str {
        &self.processing_id
    }
    fn status(&self) -> ProcessingStatus {
        self.status
    }
    fn set_status(&mut self, s: ProcessingStatus) {
        self.status = s;
    }
    fn owner(&self) -> Option<&str> {
        Some(&self.work_id)
    }
    fn into_entity(self) -> Entity {
        Entity::Processing(self)
    }
    fn from_entity(e: &Entity) -> Option<&Self> {
        match e {
            Entity::Processing(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageType {
    ContentAvailable,
    WorkTerminated,
    HPOPointsReady,
    RequestDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub msg_type: MessageType,
    pub destination: String,
    pub request_id: String,
    pub payload: BTreeMap<String, serde_json::Value>,
    pub delivery_status: DeliveryStatus,
    pub created_at: Millis,
}

impl Record for Message {
    type Status = DeliveryStatus;
    const KIND: Kind = Kind::Message;

    fn id(&self) -> &str {
        &self.message_id
    }
    fn status(&self) -> DeliveryStatus {
        self.delivery_status
    }
    fn set_status(&mut self, s: DeliveryStatus) {
        self.delivery_status = s;
    }
    fn owner(&self) -> Option<&str> {
        Some(&self.request_id)
    }
    fn into_entity(self) -> Entity {
        Entity::Message(self)
    }
    fn from_entity(e: &Entity) -> Option<&Self> {
        match e {
            Entity::Message(m) => Some(m),
            _ => None,
        }
    }
}

/// Any stored entity; the unit of the write-ahead log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Entity {
    Request(Request),
    Work(WorkRecord),
    Collection(Collection),
    Content(Content),
    Processing(Processing),
    Message(Message),
}

impl Entity {
    pub fn kind(&self) -> Kind {
        match self {
            Entity::Request(_) => Kind::Request,
            Entity::Work(_) => Kind::Work,
            Entity::Collection(_) => Kind::Collection,
            Entity::Content(_) => Kind::Content,
            Entity::Processing(_) => Kind::Processing,
            Entity::Message(_) => Kind::Message,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Entity::Request(r) => r.id(),
            Entity::Work(r) => r.id(),
            Entity::Collection(r) => r.id(),
            Entity::Content(r) => r.id(),
            Entity::Processing(r) => r.id(),
            Entity::Message(r) => r.id(),
        }
    }

    pub fn status_name(&self) -> &'static str {
        match self {
            Entity::Request(r) => r.status().name(),
            Entity::Work(r) => r.status().name(),
            Entity::Collection(r) => r.status().name(),
            Entity::Content(r) => r.status().name(),
            Entity::Processing(r) => r.status().name(),
            Entity::Message(r) => r.status().name(),
        }
    }

    pub fn index_keys(&self) -> Vec<String> {
        match self {
            Entity::Request(r) => r.index_keys(),
            Entity::Work(r) => r.index_keys(),
            Entity::Collection(r) => r.index_keys(),
            Entity::Content(r) => r.index_keys(),
            Entity::Processing(r) => r.index_keys(),
            Entity::Message(r) => r.index_keys(),
        }
    }
}
