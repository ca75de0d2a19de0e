//! TLS record framing. Records are never decrypted; only the 5-byte
//! headers are read to find boundaries.

use super::PacketError;

pub const TLS_HEADER_LEN: usize = 5;
/// Largest body a record may carry (2^14 plus expansion allowance).
pub const MAX_TLS_RECORD_BODY: usize = 16384 + 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlsRecordHeader {
    pub content_type: u8,
    pub legacy_version: u16,
    pub length: u16,
}

impl TlsRecordHeader {
    pub fn parse(bytes: &[u8; TLS_HEADER_LEN]) -> Result<Self, PacketError> {
        let header = TlsRecordHeader {
            content_type: bytes[0],
            legacy_version: u16::from_be_bytes([bytes[1], bytes[2]]),
            length: u16::from_be_bytes([bytes[3], bytes[4]]),
        };
        if !(20..=23).contains(&header.content_type) || usize::from(header.length) > MAX_TLS_RECORD_BODY {
            return Err(PacketError::NotTlsFraming);
        }
        Ok(header)
    }

    pub fn record_len(&self) -> usize {
        TLS_HEADER_LEN + usize::from(self.length)
    }
}

/// Length of the complete record at the front of `buf`, `Ok(None)` if more
/// bytes are needed.
fn front_record_len(buf: &[u8]) -> Result<Option<usize>, PacketError> {
    if let Some(&ty) = buf.first() {
        if !(20..=23).contains(&ty) {
            return Err(PacketError::NotTlsFraming);
        }
    }
    let Some(header) = buf.first_chunk::<TLS_HEADER_LEN>() else { return Ok(None) };
    let len = TlsRecordHeader::parse(header)?.record_len();
    Ok((buf.len() >= len).then_some(len))
}

/// Splits `buffer` into complete records and a trailing partial record.
pub fn tls_record_scan(buffer: &[u8]) -> Result<(Vec<Vec<u8>>, Vec<u8>), PacketError> {
    let mut records = Vec::new();
    let mut rest = buffer;
    while let Some(len) = front_record_len(rest)? {
        let (record, tail) = rest.split_at(len);
        records.push(record.to_vec());
        rest = tail;
    }
    Ok((records, rest.to_vec()))
}

/// Streaming form of [`tls_record_scan`]: feed bytes as they arrive, get
/// records out as they complete.
#[derive(Debug, Clone, Default)]
pub struct TlsRecordBuffer {
    pending: Vec<u8>,
}

impl TlsRecordBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<Vec<u8>>, PacketError> {
        self.pending.extend_from_slice(bytes);
        let (records, rest) = tls_record_scan(&self.pending)?;
        self.pending = rest;
        Ok(records)
    }

    pub fn pending(&self) -> &[u8] {
        &self.pending
    }
}
