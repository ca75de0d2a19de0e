//! LoRa frame layout.
//!
//! ```text
//!  0      1        2     3        4..6        6      7      8       9..9+n   +2
//! +------+--------+-----+--------+-----------+------+------+-------+--------+-------+
//! | 0xA7 | 0x01   | kind| session| payload_id| total| index| length| payload| crc16 |
//! +------+--------+-----+--------+-----------+------+------+-------+--------+-------+
//! ```
//!
//! Multi-byte fields are big-endian. The CRC is CRC-16/CCITT-FALSE over every
//! preceding byte.

use crc::{Crc, CRC_16_IBM_3740};

use super::{Chunk, FrameError, FrameKind, MessageKind, L_MAX};

pub const MAGIC: u8 = 0xA7;
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 9;
const CRC_LEN: usize = 2;
/// Bytes a frame adds around its payload: 9 header bytes and the CRC.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + CRC_LEN;
pub const MAX_FRAME_LEN: usize = FRAME_OVERHEAD + L_MAX;

// CRC-16/CCITT-FALSE goes by IBM-3740 in the CRC catalogue.
const CCITT_FALSE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

pub fn crc16(bytes: &[u8]) -> u16 {
    CCITT_FALSE.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoRaFrame {
    pub kind: FrameKind,
    pub session_id: u8,
    pub payload_id: u16,
    pub total_chunks: u8,
    pub chunk_index: u8,
    pub payload: Vec<u8>,
}

impl LoRaFrame {
    pub fn data(chunk: &Chunk, kind: MessageKind, session_id: u8) -> Self {
        LoRaFrame {
            kind: FrameKind::Data(kind),
            session_id,
            payload_id: chunk.payload_id,
            total_chunks: chunk.total_chunks,
            chunk_index: chunk.chunk_index,
            payload: chunk.data.clone(),
        }
    }

    /// Header-only acknowledgement of one chunk.
    pub fn ack(session_id: u8, payload_id: u16, total_chunks: u8, chunk_index: u8) -> Self {
        LoRaFrame { kind: FrameKind::ChunkAck, session_id, payload_id, total_chunks, chunk_index, payload: Vec::new() }
    }

    pub fn is_ack(&self) -> bool {
        self.kind == FrameKind::ChunkAck
    }

    pub fn chunk(&self) -> Chunk {
        Chunk {
            payload_id: self.payload_id,
            total_chunks: self.total_chunks,
            chunk_index: self.chunk_index,
            data: self.payload.clone(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }
}

pub fn encode_frame(frame: &LoRaFrame) -> Result<Vec<u8>, FrameError> {
    if frame.payload.len() > L_MAX {
        return Err(FrameError::OversizePayload(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.push(MAGIC);
    out.push(VERSION);
    out.push(frame.kind.to_byte());
    out.push(frame.session_id);
    out.extend_from_slice(&frame.payload_id.to_be_bytes());
    out.push(frame.total_chunks);
    out.push(frame.chunk_index);
    out.push(frame.payload.len() as u8);
    out.extend_from_slice(&frame.payload);
    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<LoRaFrame, FrameError> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(FrameError::LengthMismatch { declared: 0, actual: bytes.len() });
    }
    if bytes[0] != MAGIC {
        return Err(FrameError::BadMagic(bytes[0]));
    }
    if bytes[1] != VERSION {
        return Err(FrameError::BadVersion(bytes[1]));
    }
    let declared = usize::from(bytes[8]);
    if declared > L_MAX || bytes.len() != FRAME_OVERHEAD + declared {
        return Err(FrameError::LengthMismatch { declared, actual: bytes.len() });
    }
    let body_end = HEADER_LEN + declared;
    let received = u16::from_be_bytes([bytes[body_end], bytes[body_end + 1]]);
    let computed = crc16(&bytes[..body_end]);
    if computed != received {
        return Err(FrameError::CrcMismatch { computed, received });
    }
    let kind = FrameKind::from_byte(bytes[2])?;
    let total_chunks = bytes[6];
    let chunk_index = bytes[7];
    if chunk_index == 0 || chunk_index > total_chunks {
        return Err(FrameError::BadChunkIndex { index: chunk_index, total: total_chunks });
    }
    Ok(LoRaFrame {
        kind,
        session_id: bytes[3],
        payload_id: u16::from_be_bytes([bytes[4], bytes[5]]),
        total_chunks,
        chunk_index,
        payload: bytes[HEADER_LEN..body_end].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_check_value() {
        // catalogue check value for CRC-16/CCITT-FALSE
        assert_eq!(crc16(b"123456789"), 0x29B1);
    }

    #[test]
    fn ack_frame_is_header_only() {
        let bytes = encode_frame(&LoRaFrame::ack(3, 7, 4, 2)).unwrap();
        assert_eq!(bytes.len(), FRAME_OVERHEAD);
        assert_eq!(&bytes[..9], &[0xA7, 0x01, 0x09, 3, 0x00, 0x07, 4, 2, 0]);
        assert_eq!(decode_frame(&bytes).unwrap(), LoRaFrame::ack(3, 7, 4, 2));
    }

    #[test]
    fn full_chunk_frame_size() {
        let chunk = Chunk { payload_id: 1, total_chunks: 1, chunk_index: 1, data: vec![0x55; 200] };
        let bytes = encode_frame(&LoRaFrame::data(&chunk, MessageKind::TlsData, 0)).unwrap();
        assert_eq!(bytes.len(), MAX_FRAME_LEN);
    }

    #[test]
    fn oversize_payload_rejected() {
        let chunk = Chunk { payload_id: 1, total_chunks: 1, chunk_index: 1, data: vec![0; 201] };
        let frame = LoRaFrame::data(&chunk, MessageKind::TlsData, 0);
        assert_eq!(encode_frame(&frame), Err(FrameError::OversizePayload(201)));
    }

    #[test]
    fn decode_errors() {
        let chunk = Chunk { payload_id: 0x1234, total_chunks: 2, chunk_index: 1, data: b"hello".to_vec() };
        let good = encode_frame(&LoRaFrame::data(&chunk, MessageKind::DnsQuery, 9)).unwrap();

        assert!(matches!(decode_frame(&good[..FRAME_OVERHEAD - 1]), Err(FrameError::LengthMismatch { .. })));
        assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(FrameError::LengthMismatch { .. })));

        let mut bad = good.clone();
        bad[0] = 0xA8;
        assert_eq!(decode_frame(&bad), Err(FrameError::BadMagic(0xA8)));

        let mut bad = good.clone();
        bad[1] = 2;
        assert_eq!(decode_frame(&bad), Err(FrameError::BadVersion(2)));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 1] ^= 0xFF;
        assert!(matches!(decode_frame(&bad), Err(FrameError::CrcMismatch { .. })));
    }
}
