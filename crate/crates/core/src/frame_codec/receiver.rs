//! Receiving side: per-message chunk buffers and acknowledgements.

use std::collections::BTreeMap;
use std::time::Duration;

use super::{FrameKind, LoRaFrame, MessageKind, PayloadMessage, RetryPolicy};
use crate::SimTime;

/// Incomplete buffers that saw no new chunk for this long are dropped.
pub const DEFAULT_STALE_AFTER: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceiverAction {
    EmitAck { session_id: u8, payload_id: u16, total_chunks: u8, chunk_index: u8 },
    MessageReady(PayloadMessage),
}

impl ReceiverAction {
    /// The ACK frame to put on air, for `EmitAck`.
    pub fn ack_frame(&self) -> Option<LoRaFrame> {
        match *self {
            ReceiverAction::EmitAck { session_id, payload_id, total_chunks, chunk_index } => {
                Some(LoRaFrame::ack(session_id, payload_id, total_chunks, chunk_index))
            }
            ReceiverAction::MessageReady(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Buffer {
    kind: MessageKind,
    slots: Vec<Option<Vec<u8>>>,
    filled: usize,
    last_activity: SimTime,
    completed_at: Option<SimTime>,
}

impl Buffer {
    fn new(kind: MessageKind, total: u8, now: SimTime) -> Self {
        Buffer { kind, slots: vec![None; usize::from(total)], filled: 0, last_activity: now, completed_at: None }
    }

    fn matches(&self, kind: MessageKind, total: u8) -> bool {
        self.kind == kind && self.slots.len() == usize::from(total)
    }
}

/// Collects chunks per `(session_id, payload_id)` until a message is whole.
///
/// Completed messages keep a small tombstone for `retain_completed` so that
/// retransmissions caused by lost ACKs are re-acknowledged without being
/// delivered twice.
#[derive(Debug, Clone)]
pub struct ReassemblyStore {
    buffers: BTreeMap<(u8, u16), Buffer>,
    retain_completed: Duration,
    stale_after: Duration,
}

impl ReassemblyStore {
    pub fn new(retain_completed: Duration, stale_after: Duration) -> Self {
        ReassemblyStore { buffers: BTreeMap::new(), retain_completed, stale_after }
    }

    /// Retains completed messages for as long as the sender may keep
    /// retransmitting their last chunk.
    pub fn for_policy(policy: &RetryPolicy) -> Self {
        Self::new(policy.ack_timeout * (policy.max_retries + 1), DEFAULT_STALE_AFTER)
    }

    /// Number of buffers still being filled.
    pub fn pending(&self) -> usize {
        self.buffers.values().filter(|b| b.completed_at.is_none()).count()
    }

    /// `(received, total)` for an incomplete message.
    pub fn progress(&self, session_id: u8, payload_id: u16) -> Option<(usize, usize)> {
        self.buffers
            .get(&(session_id, payload_id))
            .filter(|b| b.completed_at.is_none())
            .map(|b| (b.filled, b.slots.len()))
    }

    /// Drops expired tombstones and stale incomplete buffers.
    pub fn evict(&mut self, now: SimTime) {
        let (retain, stale) = (self.retain_completed, self.stale_after);
        self.buffers.retain(|_, b| match b.completed_at {
            Some(done) => now.saturating_since(done) <= retain,
            None => now.saturating_since(b.last_activity) <= stale,
        });
    }

    /// Handles one decoded frame. Every data frame is acknowledged, including
    /// duplicates; `MessageReady` fires once per completed message.
    pub fn on_frame(&mut self, frame: &LoRaFrame, now: SimTime) -> Vec<ReceiverAction> {
        let FrameKind::Data(kind) = frame.kind else {
            return Vec::new();
        };
        self.evict(now);
        let mut actions = vec![ReceiverAction::EmitAck {
            session_id: frame.session_id,
            payload_id: frame.payload_id,
            total_chunks: frame.total_chunks,
            chunk_index: frame.chunk_index,
        }];

        let key = (frame.session_id, frame.payload_id);
        let buffer = self.buffers.entry(key).or_insert_with(|| Buffer::new(kind, frame.total_chunks, now));
        if !buffer.matches(kind, frame.total_chunks) {
            // Same id, different message: the old one is gone (id reuse).
            *buffer = Buffer::new(kind, frame.total_chunks, now);
        }
        if buffer.completed_at.is_some() {
            return actions;
        }
        buffer.last_activity = now;
        let slot = &mut buffer.slots[usize::from(frame.chunk_index - 1)];
        if slot.is_none() {
            *slot = Some(frame.payload.clone());
            buffer.filled += 1;
        }
        if buffer.filled == buffer.slots.len() {
            let data: Vec<u8> = buffer.slots.iter_mut().flat_map(|s| s.take().unwrap_or_default()).collect();
            buffer.slots.iter_mut().for_each(|s| *s = None);
            buffer.completed_at = Some(now);
            actions.push(ReceiverAction::MessageReady(PayloadMessage {
                payload_id: frame.payload_id,
                kind,
                session_id: frame.session_id,
                data,
            }));
        }
        actions
    }
}

impl Default for ReassemblyStore {
    fn default() -> Self {
        Self::for_policy(&RetryPolicy::default())
    }
}
