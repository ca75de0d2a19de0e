//! Sending side: per-chunk stop-and-wait.

use std::time::Duration;

use super::{decode_frame, encode_frame, fragment, FrameError, LoRaFrame, PayloadMessage, FRAME_OVERHEAD, L_MAX};
use crate::lora_channel::{airtime, ChannelConfig, ChannelError};
use crate::SimTime;

/// How hard the sender tries before giving up on a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub ack_timeout: Duration,
}

impl RetryPolicy {
    pub const DEFAULT_MAX_RETRIES: u32 = 5;

    pub fn new(max_retries: u32, ack_timeout: Duration) -> Result<Self, FrameError> {
        if ack_timeout.is_zero() {
            return Err(FrameError::ZeroAckTimeout);
        }
        Ok(RetryPolicy { max_retries, ack_timeout })
    }

    /// Twice the round trip of a full data frame and its ACK, plus 50 ms.
    pub fn default_ack_timeout(config: &ChannelConfig) -> Result<Duration, ChannelError> {
        let round_trip = airtime(FRAME_OVERHEAD + L_MAX, config)? + airtime(FRAME_OVERHEAD, config)?;
        Ok(Duration::from_secs_f64(2.0 * round_trip) + Duration::from_millis(50))
    }

    pub fn for_channel(config: &ChannelConfig, max_retries: u32) -> Result<Self, ChannelError> {
        Ok(RetryPolicy { max_retries, ack_timeout: Self::default_ack_timeout(config)? })
    }

    /// Attempts allowed per chunk.
    pub fn max_attempts(&self) -> u32 {
        self.max_retries.saturating_add(1)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::for_channel(&ChannelConfig::default(), Self::DEFAULT_MAX_RETRIES)
            .expect("default channel config is valid")
    }
}

/// What the sender should do after an ACK or a timeout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArqStep {
    /// Send the current chunk again.
    Retransmit,
    /// The chunk was acknowledged; the next one is current.
    Advanced,
    /// Every chunk was acknowledged.
    Completed,
    /// The chunk ran out of attempts.
    Failed { chunk_index: u8 },
}

/// Stop-and-wait state for one message. The caller owns the clock and the
/// radio: it transmits [`current_frame`](Self::current_frame), calls
/// [`record_attempt`](Self::record_attempt), and feeds back ACKs and
/// timeouts.
#[derive(Debug, Clone)]
pub struct ArqSender {
    session_id: u8,
    payload_id: u16,
    frames: Vec<Vec<u8>>,
    attempts: Vec<u32>,
    current: usize,
    max_attempts: u32,
    failed: bool,
}

impl ArqSender {
    pub fn new(message: &PayloadMessage, policy: &RetryPolicy, l_max: usize) -> Result<Self, FrameError> {
        let frames = fragment(message, l_max)?
            .iter()
            .map(|c| encode_frame(&LoRaFrame::data(c, message.kind, message.session_id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ArqSender {
            session_id: message.session_id,
            payload_id: message.payload_id,
            attempts: vec![0; frames.len()],
            frames,
            current: 0,
            max_attempts: policy.max_attempts(),
            failed: false,
        })
    }

    pub fn session_id(&self) -> u8 {
        self.session_id
    }

    pub fn payload_id(&self) -> u16 {
        self.payload_id
    }

    pub fn total_chunks(&self) -> usize {
        self.frames.len()
    }

    /// 1-based index of the chunk being sent.
    pub fn current_index(&self) -> u8 {
        (self.current + 1) as u8
    }

    /// Encoded frame for the current chunk, or `None` once finished.
    pub fn current_frame(&self) -> Option<&[u8]> {
        if self.is_finished() {
            return None;
        }
        self.frames.get(self.current).map(Vec::as_slice)
    }

    pub fn record_attempt(&mut self) {
        if let Some(n) = self.attempts.get_mut(self.current) {
            *n += 1;
        }
    }

    /// Transmissions per chunk so far.
    pub fn attempts(&self) -> &[u32] {
        &self.attempts
    }

    pub fn is_finished(&self) -> bool {
        self.failed || self.current >= self.frames.len()
    }

    /// Returns `None` when the ACK is not for the chunk in flight.
    pub fn on_ack(&mut self, ack: &LoRaFrame) -> Option<ArqStep> {
        let expected = ack.is_ack()
            && !self.is_finished()
            && ack.session_id == self.session_id
            && ack.payload_id == self.payload_id
            && ack.chunk_index == self.current_index()
            && usize::from(ack.total_chunks) == self.frames.len();
        if !expected {
            return None;
        }
        self.current += 1;
        Some(if self.current == self.frames.len() { ArqStep::Completed } else { ArqStep::Advanced })
    }

    pub fn on_timeout(&mut self) -> ArqStep {
        if self.attempts[self.current] >= self.max_attempts {
            self.failed = true;
            ArqStep::Failed { chunk_index: self.current_index() }
        } else {
            ArqStep::Retransmit
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryResult {
    Delivered { attempts: Vec<u32> },
    Failed { chunk_index: u8, attempts: Vec<u32> },
}

/// A blocking view of the radio for [`reliable_send`].
pub trait FramePort {
    fn now(&self) -> SimTime;
    /// Puts a frame on air; returns once transmission has ended.
    fn transmit(&mut self, frame: &[u8]);
    /// Next frame received before `deadline`, or `None` once the deadline
    /// has passed.
    fn receive(&mut self, deadline: SimTime) -> Option<Vec<u8>>;
}

/// Sends `message` chunk by chunk, waiting for each ACK before moving on.
pub fn reliable_send<P: FramePort>(
    message: &PayloadMessage,
    port: &mut P,
    policy: &RetryPolicy,
    l_max: usize,
) -> Result<DeliveryResult, FrameError> {
    if policy.ack_timeout.is_zero() {
        return Err(FrameError::ZeroAckTimeout);
    }
    let mut sender = ArqSender::new(message, policy, l_max)?;
    while let Some(frame) = sender.current_frame() {
        let frame = frame.to_vec();
        port.transmit(&frame);
        sender.record_attempt();
        let deadline = port.now() + policy.ack_timeout;
        let step = loop {
            match port.receive(deadline) {
                Some(bytes) => {
                    if let Some(step) = decode_frame(&bytes).ok().and_then(|f| sender.on_ack(&f)) {
                        break step;
                    }
                }
                None => break sender.on_timeout(),
            }
        };
        if let ArqStep::Failed { chunk_index } = step {
            return Ok(DeliveryResult::Failed { chunk_index, attempts: sender.attempts().to_vec() });
        }
    }
    Ok(DeliveryResult::Delivered { attempts: sender.attempts().to_vec() })
}
