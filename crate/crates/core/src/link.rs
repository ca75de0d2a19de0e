//! A point-to-point link over [`LoraChannel`] with a receiving peer attached,
//! usable as a blocking [`FramePort`].
//!
//! The peer acknowledges every data frame it hears; its ACKs travel back
//! through the same lossy, half-duplex channel.

use std::collections::VecDeque;

use crate::frame_codec::{decode_frame, encode_frame, FramePort, PayloadMessage, ReassemblyStore, ReceiverAction};
use crate::lora_channel::{ChannelError, LoraChannel, NodeId, TransmitOutcome};
use crate::SimTime;

/// Per-direction frame counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub data_sent: u64,
    pub data_delivered: u64,
    pub acks_sent: u64,
    pub acks_delivered: u64,
}

#[derive(Debug)]
pub struct SimLink {
    channel: LoraChannel,
    local: NodeId,
    now: SimTime,
    peer: ReassemblyStore,
    inbox: VecDeque<(SimTime, Vec<u8>)>,
    delivered: Vec<PayloadMessage>,
    stats: LinkStats,
}

impl SimLink {
    pub fn new(channel: LoraChannel, local: NodeId, peer: ReassemblyStore) -> Self {
        SimLink {
            channel,
            local,
            now: SimTime::ZERO,
            peer,
            inbox: VecDeque::new(),
            delivered: Vec::new(),
            stats: LinkStats::default(),
        }
    }

    pub fn channel(&self) -> &LoraChannel {
        &self.channel
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    /// Messages the peer has fully reassembled, in completion order.
    pub fn delivered(&self) -> &[PayloadMessage] {
        &self.delivered
    }

    /// Carries a frame as `sender`, waiting for the medium if needed.
    fn send(&mut self, frame: &[u8], sender: NodeId, at: SimTime) -> Result<(SimTime, Option<SimTime>), ChannelError> {
        let start = at.max(self.channel.busy_until());
        let outcome = self.channel.transmit(frame, sender, start)?;
        let end = self.channel.busy_until();
        Ok(match outcome {
            TransmitOutcome::Scheduled(arrival) => (end, Some(arrival)),
            TransmitOutcome::Lost | TransmitOutcome::Jammed => (end, None),
            TransmitOutcome::ChannelBusy => unreachable!("transmission starts once the channel is idle"),
        })
    }
}

impl FramePort for SimLink {
    fn now(&self) -> SimTime {
        self.now
    }

    fn transmit(&mut self, frame: &[u8]) {
        let (end, arrival) = self.send(frame, self.local, self.now).expect("frame fits the channel");
        self.now = end;
        self.stats.data_sent += 1;
        let Some(arrival) = arrival else { return };
        self.stats.data_delivered += 1;
        let Ok(decoded) = decode_frame(frame) else { return };
        for action in self.peer.on_frame(&decoded, arrival) {
            match action {
                ReceiverAction::MessageReady(message) => self.delivered.push(message),
                ack @ ReceiverAction::EmitAck { .. } => {
                    let bytes = encode_frame(&ack.ack_frame().expect("ack action")).expect("ack fits");
                    let (_, ack_arrival) = self.send(&bytes, self.local.peer(), arrival).expect("ack fits the channel");
                    self.stats.acks_sent += 1;
                    if let Some(t) = ack_arrival {
                        self.stats.acks_delivered += 1;
                        self.inbox.push_back((t, bytes));
                    }
                }
            }
        }
    }

    fn receive(&mut self, deadline: SimTime) -> Option<Vec<u8>> {
        match self.inbox.front() {
            Some(&(t, _)) if t <= deadline => {
                self.now = self.now.max(t);
                self.inbox.pop_front().map(|(_, bytes)| bytes)
            }
            _ => {
                self.now = self.now.max(deadline);
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_codec::{reliable_send, DeliveryResult, MessageKind, RetryPolicy, L_MAX};
    use crate::lora_channel::ChannelConfig;

    #[test]
    fn lossless_link_delivers_and_accounts_airtime() {
        let config = ChannelConfig::default();
        let policy = RetryPolicy::for_channel(&config, 5).unwrap();
        let channel = LoraChannel::new(config).unwrap();
        let mut link = SimLink::new(channel, NodeId::EndHub, ReassemblyStore::for_policy(&policy));
        let msg = PayloadMessage { payload_id: 0, kind: MessageKind::TlsData, session_id: 1, data: vec![7; 517] };
        let result = reliable_send(&msg, &mut link, &policy, L_MAX).unwrap();
        assert_eq!(result, DeliveryResult::Delivered { attempts: vec![1, 1, 1] });
        assert_eq!(link.delivered(), &[msg]);
        assert_eq!(link.channel().ledger().entries().len(), 6);
        assert_eq!(link.stats(), LinkStats { data_sent: 3, data_delivered: 3, acks_sent: 3, acks_delivered: 3 });
    }
}
