//! Message transport to consumers.

use std::collections::BTreeSet;

use parking_lot::Mutex;

use crate::store::Message;

/// At-least-once channel to consumers.
pub trait Transport: Send + Sync {
    fn deliver(&self, msg: &Message) -> Result<(), String>;
    /// Message ids acknowledged after position `cursor` of the consumer's
    /// ack log, and the new position. The log is durable on the consumer
    /// side, so a restarted Conductor replays it from zero.
    fn acks_since(&self, cursor: usize) -> (Vec<String>, usize);
}

#[derive(Debug, Default)]
struct Inner {
    down: bool,
    auto_ack: bool,
    log: Vec<Message>,
    unique: BTreeSet<String>,
    acks: Vec<String>,
}

/// In-process consumer that records every delivery.
#[derive(Debug, Default)]
pub struct MemoryTransport(Mutex<Inner>);

impl MemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Acknowledges each message as it is delivered.
    pub fn auto_ack() -> Self {
        let t = Self::default();
        t.0.lock().auto_ack = true;
        t
    }

    pub fn set_down(&self, down: bool) {
        self.0.lock().down = down;
    }

    pub fn ack(&self, message_id: &str) {
        self.0.lock().acks.push(message_id.to_string());
    }

    /// Every delivery, duplicates included.
    pub fn deliveries(&self) -> Vec<Message> {
        self.0.lock().log.clone()
    }

    /// Distinct message ids seen, as a deduplicating consumer would.
    pub fn unique_ids(&self) -> BTreeSet<String> {
        self.0.lock().unique.clone()
    }
}

impl Transport for MemoryTransport {
    fn deliver(&self, msg: &Message) -> Result<(), String> {
        let mut g = self.0.lock();
        if g.down {
            return Err("transport down".into());
        }
        g.log.push(msg.clone());
        g.unique.insert(msg.message_id.clone());
        if g.auto_ack {
            g.acks.push(msg.message_id.clone());
        }
        Ok(())
    }

    fn acks_since(&self, cursor: usize) -> (Vec<String>, usize) {
        let g = self.0.lock();
        let start = cursor.min(g.acks.len());
        (g.acks[start..].to_vec(), g.acks.len())
    }
}
