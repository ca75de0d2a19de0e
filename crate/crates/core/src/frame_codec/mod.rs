//! Message chunking, the LoRa wire frame, and reliable delivery.
//!
//! A [`PayloadMessage`] is cut into at most 255 chunks of `l_max` bytes
//! ([`fragment`]), each carried in one [`LoRaFrame`]. The receiver collects
//! chunks in a [`ReassemblyStore`] and acknowledges every data frame with a
//! `CHUNK_ACK`; the sender runs per-chunk stop-and-wait ([`ArqSender`],
//! [`reliable_send`]).

mod arq;
mod receiver;
mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arq::{reliable_send, ArqSender, ArqStep, DeliveryResult, FramePort, RetryPolicy};
pub use receiver::{ReassemblyStore, ReceiverAction, DEFAULT_STALE_AFTER};
pub use wire::{crc16, decode_frame, encode_frame, LoRaFrame, FRAME_OVERHEAD, MAGIC, MAX_FRAME_LEN, VERSION};

/// Chunk payload size used on the link.
pub const L_MAX: usize = 200;

/// Largest message that fits in 255 chunks of [`L_MAX`].
pub const MAX_MESSAGE_LEN: usize = 255 * L_MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("payload needs {0} chunks, more than 255")]
    TooManyChunks(usize),
    #[error("chunk size must be in 1..=200, got {0}")]
    InvalidChunkSize(usize),
    #[error("frame payload of {0} bytes exceeds 200")]
    OversizePayload(usize),
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("length mismatch: header says {declared} payload bytes, buffer holds {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("crc mismatch: computed {computed:#06x}, frame carries {received:#06x}")]
    CrcMismatch { computed: u16, received: u16 },
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("chunk index {index} outside 1..={total}")]
    BadChunkIndex { index: u8, total: u8 },
    #[error("ack timeout must be positive")]
    ZeroAckTimeout,
}

/// What a message carries across the tunnel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    DnsQuery,
    DnsResp,
    TcpSyn,
    TcpSynack,
    TcpAck,
    TlsData,
    Fin,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::DnsQuery,
        MessageKind::DnsResp,
        MessageKind::TcpSyn,
        MessageKind::TcpSynack,
        MessageKind::TcpAck,
        MessageKind::TlsData,
        MessageKind::Fin,
        MessageKind::Error,
    ];
}

/// The `kind` byte of a frame: one of the message kinds, or a chunk ACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Data(MessageKind),
    ChunkAck,
}

impl FrameKind {
    pub fn to_byte(self) -> u8 {
        match self {
            FrameKind::Data(MessageKind::DnsQuery) => 0x01,
            FrameKind::Data(MessageKind::DnsResp) => 0x02,
            FrameKind::Data(MessageKind::TcpSyn) => 0x03,
            FrameKind::Data(MessageKind::TcpSynack) => 0x04,
            FrameKind::Data(MessageKind::TcpAck) => 0x05,
            FrameKind::Data(MessageKind::TlsData) => 0x06,
            FrameKind::Data(MessageKind::Fin) => 0x07,
            FrameKind::Data(MessageKind::Error) => 0x08,
            FrameKind::ChunkAck => 0x09,
        }
    }

    pub fn from_byte(byte: u8) -> Result<Self, FrameError> {
        Ok(match byte {
            0x01 => FrameKind::Data(MessageKind::DnsQuery),
            0x02 => FrameKind::Data(MessageKind::DnsResp),
            0x03 => FrameKind::Data(MessageKind::TcpSyn),
            0x04 => FrameKind::Data(MessageKind::TcpSynack),
            0x05 => FrameKind::Data(MessageKind::TcpAck),
            0x06 => FrameKind::Data(MessageKind::TlsData),
            0x07 => FrameKind::Data(MessageKind::Fin),
            0x08 => FrameKind::Data(MessageKind::Error),
            0x09 => FrameKind::ChunkAck,
            other => return Err(FrameError::UnknownKind(other)),
        })
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// An application-level message exchanged between the two proxies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadMessage {
    pub payload_id: u16,
    pub kind: MessageKind,
    pub session_id: u8,
    pub data: Vec<u8>,
}

/// One slice of a message's data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub payload_id: u16,
    pub total_chunks: u8,
    /// 1-based.
    pub chunk_index: u8,
    pub data: Vec<u8>,
}

/// Number of chunks needed for `len` bytes.
pub fn chunk_count(len: usize, l_max: usize) -> usize {
    len.div_ceil(l_max)
}

/// Cuts `message.data` into `ceil(len / l_max)` chunks; every chunk but the
/// last holds exactly `l_max` bytes.
pub fn fragment(message: &PayloadMessage, l_max: usize) -> Result<Vec<Chunk>, FrameError> {
    if l_max == 0 || l_max > L_MAX {
        return Err(FrameError::InvalidChunkSize(l_max));
    }
    if message.data.is_empty() {
        return Err(FrameError::EmptyPayload);
    }
    let total = chunk_count(message.data.len(), l_max);
    let total_u8 = u8::try_from(total).map_err(|_| FrameError::TooManyChunks(total))?;
    Ok(message
        .data
        .chunks(l_max)
        .enumerate()
        .map(|(i, data)| Chunk {
            payload_id: message.payload_id,
            total_chunks: total_u8,
            chunk_index: (i + 1) as u8,
            data: data.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReassemblyResult {
    Complete(Vec<u8>),
    /// Missing 1-based chunk indices, ascending.
    Incomplete(Vec<u8>),
    Inconsistent,
}

/// Rebuilds a payload from its chunks, in any order. Exact duplicates are
/// ignored; conflicting duplicates or mixed metadata are `Inconsistent`.
pub fn reassemble(chunks: &[Chunk]) -> ReassemblyResult {
    let Some(first) = chunks.first() else {
        return ReassemblyResult::Incomplete(Vec::new());
    };
    let total = first.total_chunks;
    let mut slots: Vec<Option<&[u8]>> = vec![None; usize::from(total)];
    for chunk in chunks {
        if chunk.payload_id != first.payload_id || chunk.total_chunks != total {
            return ReassemblyResult::Inconsistent;
        }
        if chunk.chunk_index == 0 || chunk.chunk_index > total {
            return ReassemblyResult::Inconsistent;
        }
        let slot = &mut slots[usize::from(chunk.chunk_index - 1)];
        match slot {
            Some(existing) if *existing != chunk.data.as_slice() => return ReassemblyResult::Inconsistent,
            _ => *slot = Some(&chunk.data),
        }
    }
    let missing: Vec<u8> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| (i + 1) as u8).collect();
    if !missing.is_empty() {
        return ReassemblyResult::Incomplete(missing);
    }
    ReassemblyResult::Complete(slots.into_iter().flatten().flatten().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(len: usize) -> PayloadMessage {
        PayloadMessage {
            payload_id: 9,
            kind: MessageKind::TlsData,
            session_id: 1,
            data: (0..len).map(|i| (i * 7 % 251) as u8).collect(),
        }
    }

    fn sizes(len: usize) -> Vec<usize> {
        fragment(&msg(len), L_MAX).unwrap().iter().map(|c| c.data.len()).collect()
    }

    #[test]
    fn fragment_examples() {
        assert_eq!(sizes(55), vec![55]);
        assert_eq!(sizes(400), vec![200, 200]);
        assert_eq!(sizes(401), vec![200, 200, 1]);
        assert_eq!(sizes(517), vec![200, 200, 117]);
    }

    #[test]
    fn fragment_errors() {
        assert_eq!(fragment(&msg(0), L_MAX), Err(FrameError::EmptyPayload));
        assert_eq!(fragment(&msg(MAX_MESSAGE_LEN + 1), L_MAX), Err(FrameError::TooManyChunks(256)));
        assert_eq!(fragment(&msg(MAX_MESSAGE_LEN), L_MAX).unwrap().len(), 255);
        assert_eq!(fragment(&msg(10), 0), Err(FrameError::InvalidChunkSize(0)));
    }

    #[test]
    fn reassemble_missing_and_inconsistent() {
        let chunks = fragment(&msg(401), L_MAX).unwrap();
        let partial = vec![chunks[0].clone(), chunks[2].clone()];
        assert_eq!(reassemble(&partial), ReassemblyResult::Incomplete(vec![2]));

        let mut conflicting = chunks.clone();
        let mut bad = chunks[1].clone();
        bad.data[0] ^= 1;
        conflicting.push(bad);
        assert_eq!(reassemble(&conflicting), ReassemblyResult::Inconsistent);

        let mut mixed = chunks.clone();
        mixed[2].total_chunks = 4;
        assert_eq!(reassemble(&mixed), ReassemblyResult::Inconsistent);
    }

    /// Every arrival order of every multiset built from the chunks of a
    /// k-chunk payload (k <= 4) with at most one duplicated chunk.
    #[test]
    fn reassemble_brute_force_orders_and_duplicates() {
        fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let head = rest.remove(i);
                for mut p in permutations(&rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }

        for k in 1..=4usize {
            let message = msg((k - 1) * L_MAX + 13);
            let chunks = fragment(&message, L_MAX).unwrap();
            assert_eq!(chunks.len(), k);
            let mut cases = vec![(0..k).collect::<Vec<_>>()];
            for dup in 0..k {
                let mut with_dup: Vec<usize> = (0..k).collect();
                with_dup.push(dup);
                cases.push(with_dup);
            }
            for case in cases {
                for order in permutations(&case) {
                    let arrived: Vec<Chunk> = order.iter().map(|&i| chunks[i].clone()).collect();
                    assert_eq!(reassemble(&arrived), ReassemblyResult::Complete(message.data.clone()));
                }
            }
        }
    }

    #[test]
    fn kind_bytes_round_trip() {
        for kind in MessageKind::ALL {
            let fk = FrameKind::Data(kind);
            assert_eq!(FrameKind::from_byte(fk.to_byte()), Ok(fk));
        }
        assert_eq!(FrameKind::from_byte(0x09), Ok(FrameKind::ChunkAck));
        assert_eq!(FrameKind::from_byte(0x00), Err(FrameError::UnknownKind(0)));
    }
}
