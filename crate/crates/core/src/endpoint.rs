//! The reliable message pipe each proxy runs on its radio.
//!
//! An [`Endpoint`] is sans-IO: the owner asks it for the next frame to put on
//! air ([`Endpoint::poll_transmit`]), arms ACK timers it hands out, and feeds
//! back received frames and expired timers. Outgoing messages leave in FIFO
//! order, one message in flight at a time; pending ACKs go first. Incoming
//! messages are released per session in `payload_id` order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use crate::frame_codec::{
    decode_frame, encode_frame, ArqSender, ArqStep, FrameError, LoRaFrame, MessageKind, PayloadMessage,
    ReassemblyStore, ReceiverAction, RetryPolicy, DEFAULT_STALE_AFTER,
};
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointEvent {
    /// A complete message from the peer, in order for its session.
    Delivered(PayloadMessage),
    /// Every chunk of an outgoing message was acknowledged.
    Sent { session_id: u8, payload_id: u16, kind: MessageKind },
    /// An outgoing message ran out of retries and was dropped.
    SendFailed { session_id: u8, payload_id: u16, kind: MessageKind, chunk_index: u8 },
}

/// A frame to put on air. When `ack_timer` is set, the owner must call
/// [`Endpoint::on_timer`] with that token once the ACK timeout has elapsed
/// after the transmission ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub bytes: Vec<u8>,
    pub ack_timer: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EndpointStats {
    pub messages_queued: u64,
    pub messages_sent: u64,
    pub messages_failed: u64,
    pub messages_delivered: u64,
    /// Delivered messages that arrived after their session was forgotten.
    pub messages_discarded: u64,
    pub data_frames_sent: u64,
    pub retransmissions: u64,
    pub acks_sent: u64,
    pub frames_received: u64,
    pub frames_rejected: u64,
}

/// Releases messages of one session in `payload_id` order (modulo 2^16).
/// A gap that stays open longer than the gap timeout is skipped: the
/// missing message was abandoned by its sender.
#[derive(Debug, Clone, Default)]
pub struct MessageSequencer {
    next: u16,
    held: BTreeMap<u16, (SimTime, PayloadMessage)>,
    last_activity: SimTime,
}

impl MessageSequencer {
    pub fn new(first_id: u16) -> Self {
        MessageSequencer { next: first_id, held: BTreeMap::new(), last_activity: SimTime::ZERO }
    }

    pub fn next_id(&self) -> u16 {
        self.next
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    /// Accepts a message and returns whatever became releasable. Messages
    /// behind the release point are dropped as late duplicates.
    pub fn push(&mut self, message: PayloadMessage, now: SimTime) -> Vec<PayloadMessage> {
        self.last_activity = self.last_activity.max(now);
        let ahead = message.payload_id.wrapping_sub(self.next);
        if ahead >= 0x8000 {
            return Vec::new();
        }
        self.held.entry(message.payload_id).or_insert((now, message));
        self.drain()
    }

    /// Skips the gap in front of held messages that waited longer than
    /// `gap_timeout`.
    pub fn skip_stale(&mut self, now: SimTime, gap_timeout: Duration) -> Vec<PayloadMessage> {
        let oldest = self.held.values().map(|(t, _)| *t).min();
        match oldest {
            Some(t) if now.saturating_since(t) > gap_timeout => {
                let next = self.next;
                if let Some(&closest) = self.held.keys().min_by_key(|&&id| id.wrapping_sub(next)) {
                    self.next = closest;
                }
                self.drain()
            }
            _ => Vec::new(),
        }
    }

    fn drain(&mut self) -> Vec<PayloadMessage> {
        let mut out = Vec::new();
        while let Some((_, message)) = self.held.remove(&self.next) {
            out.push(message);
            self.next = self.next.wrapping_add(1);
        }
        out
    }
}

#[derive(Debug)]
struct Outbound {
    kind: MessageKind,
    sender: ArqSender,
}

#[derive(Debug)]
pub struct Endpoint {
    policy: RetryPolicy,
    l_max: usize,
    next_payload_id: BTreeMap<u8, u16>,
    queue: VecDeque<Outbound>,
    in_flight: Option<u64>,
    next_token: u64,
    acks: VecDeque<LoRaFrame>,
    store: ReassemblyStore,
    inbound: BTreeMap<u8, MessageSequencer>,
    /// Forgotten sessions whose late messages are accepted and discarded
    /// until a message with `payload_id` 0 opens the id again.
    closed: BTreeSet<u8>,
    gap_timeout: Duration,
    stats: EndpointStats,
}

impl Endpoint {
    pub fn new(policy: RetryPolicy, l_max: usize) -> Self {
        Endpoint {
            policy,
            l_max,
            next_payload_id: BTreeMap::new(),
            queue: VecDeque::new(),
            in_flight: None,
            next_token: 0,
            acks: VecDeque::new(),
            store: ReassemblyStore::for_policy(&policy),
            inbound: BTreeMap::new(),
            closed: BTreeSet::new(),
            gap_timeout: DEFAULT_STALE_AFTER,
            stats: EndpointStats::default(),
        }
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn stats(&self) -> EndpointStats {
        self.stats
    }

    /// Queues a message and returns the `payload_id` assigned to it.
    pub fn send(&mut self, kind: MessageKind, session_id: u8, data: Vec<u8>) -> Result<u16, FrameError> {
        let counter = self.next_payload_id.entry(session_id).or_insert(0);
        let message = PayloadMessage { payload_id: *counter, kind, session_id, data };
        let sender = ArqSender::new(&message, &self.policy, self.l_max)?;
        *counter = counter.wrapping_add(1);
        self.queue.push_back(Outbound { kind, sender });
        self.stats.messages_queued += 1;
        Ok(message.payload_id)
    }

    /// Messages waiting to be sent, including the one in progress.
    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// True when [`poll_transmit`](Self::poll_transmit) would return a frame.
    pub fn wants_transmit(&self) -> bool {
        !self.acks.is_empty() || (self.in_flight.is_none() && !self.queue.is_empty())
    }

    /// Next frame to transmit: a pending ACK, else the current chunk if it
    /// is not already waiting for its ACK.
    pub fn poll_transmit(&mut self) -> Option<Outgoing> {
        if let Some(ack) = self.acks.pop_front() {
            self.stats.acks_sent += 1;
            return Some(Outgoing { bytes: encode_frame(&ack).expect("ack frames are header-only"), ack_timer: None });
        }
        if self.in_flight.is_some() {
            return None;
        }
        let front = self.queue.front_mut()?;
        let bytes = front.sender.current_frame()?.to_vec();
        let index = usize::from(front.sender.current_index() - 1);
        if front.sender.attempts()[index] > 0 {
            self.stats.retransmissions += 1;
        }
        front.sender.record_attempt();
        self.stats.data_frames_sent += 1;
        let token = self.next_token;
        self.next_token += 1;
        self.in_flight = Some(token);
        Some(Outgoing { bytes, ack_timer: Some(token) })
    }

    /// An ACK timer expired. Stale tokens are ignored.
    pub fn on_timer(&mut self, token: u64) -> Vec<EndpointEvent> {
        if self.in_flight != Some(token) {
            return Vec::new();
        }
        self.in_flight = None;
        let Some(front) = self.queue.front_mut() else { return Vec::new() };
        match front.sender.on_timeout() {
            ArqStep::Failed { chunk_index } => {
                let done = self.queue.pop_front().expect("front exists");
                self.stats.messages_failed += 1;
                vec![EndpointEvent::SendFailed {
                    session_id: done.sender.session_id(),
                    payload_id: done.sender.payload_id(),
                    kind: done.kind,
                    chunk_index,
                }]
            }
            _ => Vec::new(),
        }
    }

    /// Handles a frame heard on the channel.
    pub fn on_frame(&mut self, bytes: &[u8], now: SimTime) -> Vec<EndpointEvent> {
        let Ok(frame) = decode_frame(bytes) else {
            self.stats.frames_rejected += 1;
            return Vec::new();
        };
        self.stats.frames_received += 1;
        if frame.is_ack() {
            return self.on_ack(&frame);
        }
        let mut events = Vec::new();
        for action in self.store.on_frame(&frame, now) {
            match action {
                ReceiverAction::EmitAck { .. } => self.acks.push_back(action.ack_frame().expect("ack action")),
                ReceiverAction::MessageReady(message) => {
                    if self.closed.contains(&message.session_id) {
                        if message.payload_id != 0 {
                            self.stats.messages_delivered += 1;
                            self.stats.messages_discarded += 1;
                            continue;
                        }
                        self.closed.remove(&message.session_id);
                    }
                    let sequencer = self.inbound.entry(message.session_id).or_default();
                    for m in sequencer.push(message, now) {
                        self.stats.messages_delivered += 1;
                        events.push(EndpointEvent::Delivered(m));
                    }
                }
            }
        }
        events
    }

    fn on_ack(&mut self, ack: &LoRaFrame) -> Vec<EndpointEvent> {
        let Some(front) = self.queue.front_mut() else { return Vec::new() };
        match front.sender.on_ack(ack) {
            Some(ArqStep::Completed) => {
                self.in_flight = None;
                let done = self.queue.pop_front().expect("front exists");
                self.stats.messages_sent += 1;
                vec![EndpointEvent::Sent {
                    session_id: done.sender.session_id(),
                    payload_id: done.sender.payload_id(),
                    kind: done.kind,
                }]
            }
            Some(_) => {
                self.in_flight = None;
                Vec::new()
            }
            None => Vec::new(),
        }
    }

    /// Housekeeping: drops expired reassembly state, skips message gaps that
    /// stayed open too long, and forgets idle numbering of sessions for
    /// which `live` is false.
    pub fn tick(&mut self, now: SimTime, live: impl Fn(u8) -> bool) -> Vec<EndpointEvent> {
        self.store.evict(now);
        let gap_timeout = self.gap_timeout;
        let mut events = Vec::new();
        for sequencer in self.inbound.values_mut() {
            for m in sequencer.skip_stale(now, gap_timeout) {
                self.stats.messages_delivered += 1;
                events.push(EndpointEvent::Delivered(m));
            }
        }
        self.inbound.retain(|&session, seq| {
            live(session) || seq.held() > 0 || now.saturating_since(seq.last_activity) <= gap_timeout
        });
        events
    }

    /// Resets per-session numbering in both directions. Both ends must do
    /// this before a session id is reused.
    pub fn forget_session(&mut self, session_id: u8) {
        self.next_payload_id.remove(&session_id);
        self.inbound.remove(&session_id);
        self.closed.insert(session_id);
    }

    /// Reopens a forgotten session whose inbound numbering continues at
    /// `next_inbound`, for a session restarted by a message already delivered.
    pub fn resume_session(&mut self, session_id: u8, next_inbound: u16) {
        self.closed.remove(&session_id);
        self.inbound.insert(session_id, MessageSequencer::new(next_inbound));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_codec::{fragment, L_MAX};

    fn deliver(from: &mut Endpoint, to: &mut Endpoint, now: SimTime) -> Vec<EndpointEvent> {
        let mut events = Vec::new();
        while let Some(out) = from.poll_transmit() {
            events.extend(to.on_frame(&out.bytes, now));
            while let Some(back) = to.poll_transmit() {
                events.extend(from.on_frame(&back.bytes, now));
            }
        }
        events
    }

    #[test]
    fn messages_flow_in_order_with_acks() {
        let mut a = Endpoint::new(RetryPolicy::default(), L_MAX);
        let mut b = Endpoint::new(RetryPolicy::default(), L_MAX);
        assert_eq!(a.send(MessageKind::DnsQuery, 1, b"api.test".to_vec()).unwrap(), 0);
        assert_eq!(a.send(MessageKind::TlsData, 1, vec![9; 517]).unwrap(), 1);
        assert_eq!(a.send(MessageKind::TlsData, 2, vec![8; 10]).unwrap(), 0);
        let events = deliver(&mut a, &mut b, SimTime::ZERO);
        let delivered: Vec<(u8, u16, usize)> = events
            .iter()
            .filter_map(|e| match e {
                EndpointEvent::Delivered(m) => Some((m.session_id, m.payload_id, m.data.len())),
                _ => None,
            })
            .collect();
        assert_eq!(delivered, [(1, 0, 8), (1, 1, 517), (2, 0, 10)]);
        assert_eq!(events.iter().filter(|e| matches!(e, EndpointEvent::Sent { .. })).count(), 3);
        assert_eq!(a.stats().data_frames_sent, 5);
        assert_eq!(b.stats().acks_sent, 5);
    }

    #[test]
    fn timeout_retransmits_then_fails() {
        let policy = RetryPolicy::new(1, Duration::from_millis(100)).unwrap();
        let mut a = Endpoint::new(policy, L_MAX);
        a.send(MessageKind::TcpSyn, 3, vec![1; 40]).unwrap();
        let first = a.poll_transmit().unwrap();
        assert!(a.poll_transmit().is_none());
        assert!(a.on_timer(first.ack_timer.unwrap() + 7).is_empty());
        assert!(a.on_timer(first.ack_timer.unwrap()).is_empty());
        let second = a.poll_transmit().unwrap();
        assert_eq!(second.bytes, first.bytes);
        let events = a.on_timer(second.ack_timer.unwrap());
        assert_eq!(
            events,
            [EndpointEvent::SendFailed { session_id: 3, payload_id: 0, kind: MessageKind::TcpSyn, chunk_index: 1 }]
        );
        assert_eq!(a.stats().retransmissions, 1);
        assert!(!a.wants_transmit());
    }

    /// Two messages of one session complete in every possible interleaving
    /// of their chunks; delivery is always in payload_id order.
    #[test]
    fn delivery_order_is_independent_of_completion_order() {
        let mk = |id: u16, len: usize| PayloadMessage {
            payload_id: id,
            kind: MessageKind::TlsData,
            session_id: 5,
            data: vec![id as u8; len],
        };
        let frames = |m: &PayloadMessage| -> Vec<Vec<u8>> {
            fragment(m, L_MAX)
                .unwrap()
                .iter()
                .map(|c| encode_frame(&LoRaFrame::data(c, m.kind, m.session_id)).unwrap())
                .collect()
        };
        let (m0, m1) = (mk(0, 450), mk(1, 250));
        let (f0, f1) = (frames(&m0), frames(&m1));
        // all interleavings of 3 chunks of m0 with 2 chunks of m1
        for mask in 0u32..32 {
            if mask.count_ones() != 2 {
                continue;
            }
            let (mut i0, mut i1) = (0, 0);
            let mut ep = Endpoint::new(RetryPolicy::default(), L_MAX);
            let mut order = Vec::new();
            for slot in 0..5 {
                let bytes = if mask & (1 << slot) != 0 {
                    i1 += 1;
                    &f1[i1 - 1]
                } else {
                    i0 += 1;
                    &f0[i0 - 1]
                };
                for e in ep.on_frame(bytes, SimTime::ZERO) {
                    if let EndpointEvent::Delivered(m) = e {
                        order.push(m.payload_id);
                    }
                }
            }
            assert_eq!(order, [0, 1], "interleaving {mask:05b}");
        }
    }

    #[test]
    fn abandoned_gap_is_skipped_after_timeout() {
        let mut seq = MessageSequencer::new(0);
        let m = |id| PayloadMessage { payload_id: id, kind: MessageKind::Fin, session_id: 1, data: vec![1] };
        assert!(seq.push(m(1), SimTime::ZERO).is_empty());
        assert!(seq.skip_stale(SimTime::from_secs_f64(10.0), Duration::from_secs(30)).is_empty());
        let released = seq.skip_stale(SimTime::from_secs_f64(31.0), Duration::from_secs(30));
        assert_eq!(released.len(), 1);
        assert_eq!(seq.next_id(), 2);
        assert!(seq.push(m(0), SimTime::from_secs_f64(32.0)).is_empty());
    }

    #[test]
    fn sequencer_wraps() {
        let mut seq = MessageSequencer::new(u16::MAX);
        let m = |id| PayloadMessage { payload_id: id, kind: MessageKind::TlsData, session_id: 1, data: vec![1] };
        assert!(seq.push(m(0), SimTime::ZERO).is_empty());
        assert_eq!(seq.push(m(u16::MAX), SimTime::ZERO).len(), 2);
        assert_eq!(seq.next_id(), 1);
    }
}
