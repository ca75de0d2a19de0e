//! Just enough DNS to answer an A query from the LAN side.

use std::net::{Ipv4Addr, SocketAddrV4};

use super::{PacketError, PacketView, Protocol};

pub const DNS_PORT: u16 = 53;
pub const DEFAULT_DNS_TTL: u32 = 60;
const HEADER_LEN: usize = 12;
const QTYPE_A: u16 = 1;
const QCLASS_IN: u16 = 1;
const FLAG_QR: u16 = 0x8000;
const FLAG_RD: u16 = 0x0100;
const FLAG_RA: u16 = 0x0080;
const OPCODE_MASK: u16 = 0x7800;
const MAX_NAME_LEN: usize = 255;
const MAX_POINTER_JUMPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsQuery {
    pub transaction_id: u16,
    /// Lowercase, dot-separated, without the trailing root dot.
    pub qname: String,
}

/// Decoded first question of a query message.
struct Question {
    labels: Vec<Vec<u8>>,
    qtype: u16,
    qclass: u16,
}

/// Reads a possibly compressed domain name starting at `offset`. Returns
/// the labels and the offset just past the name as written at `offset`.
pub(super) fn read_name(msg: &[u8], offset: usize) -> Result<(Vec<Vec<u8>>, usize), PacketError> {
    let mut labels = Vec::new();
    let mut at = offset;
    let mut end = None;
    let mut jumps = 0;
    let mut name_len = 0;
    loop {
        let len = *msg.get(at).ok_or(PacketError::NotDns)?;
        match len & 0xC0 {
            0x00 => {
                if len == 0 {
                    return Ok((labels, end.unwrap_or(at + 1)));
                }
                let label = msg.get(at + 1..at + 1 + usize::from(len)).ok_or(PacketError::NotDns)?;
                name_len += label.len() + 1;
                if name_len > MAX_NAME_LEN {
                    return Err(PacketError::NotDns);
                }
                labels.push(label.to_vec());
                at += 1 + usize::from(len);
            }
            0xC0 => {
                let low = *msg.get(at + 1).ok_or(PacketError::NotDns)?;
                jumps += 1;
                if jumps > MAX_POINTER_JUMPS {
                    return Err(PacketError::NotDns);
                }
                end.get_or_insert(at + 2);
                at = usize::from(u16::from_be_bytes([len & 0x3F, low]));
            }
            _ => return Err(PacketError::NotDns),
        }
    }
}

fn join_lower(labels: &[Vec<u8>]) -> Result<String, PacketError> {
    let parts = labels
        .iter()
        .map(|l| std::str::from_utf8(l).map(str::to_ascii_lowercase).map_err(|_| PacketError::NotDns))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.join("."))
}

fn query_message(packet: &PacketView) -> Result<(&[u8], u16, Question), PacketError> {
    if packet.protocol() != Protocol::Udp || packet.dst_port != DNS_PORT {
        return Err(PacketError::NotDns);
    }
    let msg = packet.payload.as_slice();
    if msg.len() < HEADER_LEN {
        return Err(PacketError::NotDns);
    }
    let flags = u16::from_be_bytes([msg[2], msg[3]]);
    let qdcount = u16::from_be_bytes([msg[4], msg[5]]);
    if flags & FLAG_QR != 0 || flags & OPCODE_MASK != 0 || qdcount == 0 {
        return Err(PacketError::NotDns);
    }
    let (labels, end) = read_name(msg, HEADER_LEN)?;
    let fixed = msg.get(end..end + 4).ok_or(PacketError::NotDns)?;
    let question = Question {
        labels,
        qtype: u16::from_be_bytes([fixed[0], fixed[1]]),
        qclass: u16::from_be_bytes([fixed[2], fixed[3]]),
    };
    Ok((msg, flags, question))
}

/// Transaction id and name of an A query sent to port 53.
pub fn extract_dns_query(packet: &PacketView) -> Result<DnsQuery, PacketError> {
    let (msg, _, question) = query_message(packet)?;
    if question.qclass != QCLASS_IN {
        return Err(PacketError::NotDns);
    }
    if question.qtype != QTYPE_A {
        return Err(PacketError::UnsupportedQtype(question.qtype));
    }
    Ok(DnsQuery { transaction_id: u16::from_be_bytes([msg[0], msg[1]]), qname: join_lower(&question.labels)? })
}

/// Answer to `query` with a single A record, addressed back to the asker.
/// The question is echoed uncompressed with its original letter case.
pub fn build_dns_response(query: &PacketView, resolved: Ipv4Addr, ttl: u32) -> Result<PacketView, PacketError> {
    extract_dns_query(query)?;
    let (msg, flags, question) = query_message(query)?;

    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&msg[..2]);
    out.extend_from_slice(&(FLAG_QR | (flags & FLAG_RD) | FLAG_RA).to_be_bytes());
    out.extend_from_slice(&[0, 1, 0, 1, 0, 0, 0, 0]);
    for label in &question.labels {
        out.push(label.len() as u8);
        out.extend_from_slice(label);
    }
    out.push(0);
    out.extend_from_slice(&question.qtype.to_be_bytes());
    out.extend_from_slice(&question.qclass.to_be_bytes());
    // answer name points back at the question name
    out.extend_from_slice(&[0xC0, HEADER_LEN as u8]);
    out.extend_from_slice(&QTYPE_A.to_be_bytes());
    out.extend_from_slice(&QCLASS_IN.to_be_bytes());
    out.extend_from_slice(&ttl.to_be_bytes());
    out.extend_from_slice(&4u16.to_be_bytes());
    out.extend_from_slice(&resolved.octets());

    PacketView::new_udp(
        SocketAddrV4::new(query.dst_ip, query.dst_port),
        SocketAddrV4::new(query.src_ip, query.src_port),
        out,
    )
}

/// Builds an A query datagram; used by LAN-side clients.
pub fn build_dns_query(
    src: SocketAddrV4,
    resolver: SocketAddrV4,
    transaction_id: u16,
    qname: &str,
) -> Result<PacketView, PacketError> {
    let mut msg = Vec::with_capacity(HEADER_LEN + qname.len() + 6);
    msg.extend_from_slice(&transaction_id.to_be_bytes());
    msg.extend_from_slice(&FLAG_RD.to_be_bytes());
    msg.extend_from_slice(&[0, 1, 0, 0, 0, 0, 0, 0]);
    for label in qname.trim_end_matches('.').split('.') {
        let len = u8::try_from(label.len()).ok().filter(|&n| (1..=63).contains(&n)).ok_or(PacketError::NotDns)?;
        msg.push(len);
        msg.extend_from_slice(label.as_bytes());
    }
    msg.push(0);
    msg.extend_from_slice(&QTYPE_A.to_be_bytes());
    msg.extend_from_slice(&QCLASS_IN.to_be_bytes());
    PacketView::new_udp(src, resolver, msg)
}

/// First A record of a response message, with its transaction id.
pub fn parse_dns_answer(packet: &PacketView) -> Result<(u16, Ipv4Addr), PacketError> {
    let msg = packet.payload.as_slice();
    if packet.protocol() != Protocol::Udp || packet.src_port != DNS_PORT || msg.len() < HEADER_LEN {
        return Err(PacketError::NotDns);
    }
    let flags = u16::from_be_bytes([msg[2], msg[3]]);
    let qdcount = u16::from_be_bytes([msg[4], msg[5]]);
    let ancount = u16::from_be_bytes([msg[6], msg[7]]);
    if flags & FLAG_QR == 0 {
        return Err(PacketError::NotDns);
    }
    let mut at = HEADER_LEN;
    for _ in 0..qdcount {
        at = read_name(msg, at)?.1 + 4;
    }
    for _ in 0..ancount {
        at = read_name(msg, at)?.1;
        let fixed = msg.get(at..at + 10).ok_or(PacketError::NotDns)?;
        let rtype = u16::from_be_bytes([fixed[0], fixed[1]]);
        let rdlen = usize::from(u16::from_be_bytes([fixed[8], fixed[9]]));
        let rdata = msg.get(at + 10..at + 10 + rdlen).ok_or(PacketError::NotDns)?;
        if rtype == QTYPE_A && rdlen == 4 {
            return Ok((u16::from_be_bytes([msg[0], msg[1]]), Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3])));
        }
        at += 10 + rdlen;
    }
    Err(PacketError::NotDns)
}

#[cfg(test)]
mod tests {
    use hickory_proto::op::Message;
    use hickory_proto::rr::RData;

    use super::*;

    fn client() -> SocketAddrV4 {
        "192.168.4.2:5353".parse().unwrap()
    }

    fn resolver() -> SocketAddrV4 {
        "192.168.4.1:53".parse().unwrap()
    }

    #[test]
    fn extracts_a_query() {
        let q = build_dns_query(client(), resolver(), 0xBEEF, "Example.COM").unwrap();
        assert_eq!(
            extract_dns_query(&q).unwrap(),
            DnsQuery { transaction_id: 0xBEEF, qname: "example.com".to_string() }
        );
    }

    #[test]
    fn rejects_other_qtypes_and_non_queries() {
        let mut q = build_dns_query(client(), resolver(), 1, "example.com").unwrap();
        let n = q.payload.len();
        q.payload[n - 3] = 28; // AAAA
        let q = q.rebuilt().unwrap();
        assert_eq!(extract_dns_query(&q), Err(PacketError::UnsupportedQtype(28)));

        let elsewhere = build_dns_query(client(), "192.168.4.1:54".parse().unwrap(), 1, "example.com").unwrap();
        assert_eq!(extract_dns_query(&elsewhere), Err(PacketError::NotDns));
    }

    #[test]
    fn compressed_name_matches_reference_decoder() {
        // two questions; the second is "api" followed by a pointer into the first
        let mut msg = vec![0x12, 0x34, 0x01, 0x00, 0, 2, 0, 0, 0, 0, 0, 0];
        msg.extend_from_slice(b"\x03www\x07Example\x03com\x00");
        msg.extend_from_slice(&[0, 1, 0, 1]);
        let second = msg.len();
        msg.extend_from_slice(b"\x03api\xC0\x10");
        msg.extend_from_slice(&[0, 1, 0, 1]);

        let (labels, end) = read_name(&msg, second).unwrap();
        assert_eq!(end, second + 6);
        assert_eq!(join_lower(&labels).unwrap(), "api.example.com");

        let reference = Message::from_vec(&msg).unwrap();
        let names: Vec<String> =
            reference.queries.iter().map(|q| q.name().to_ascii().trim_end_matches('.').to_ascii_lowercase()).collect();
        assert_eq!(names, ["www.example.com", "api.example.com"]);
    }

    #[test]
    fn pointer_loops_are_rejected() {
        let mut msg = vec![0; 12];
        msg.extend_from_slice(&[0xC0, 12]);
        assert_eq!(read_name(&msg, 12), Err(PacketError::NotDns));
    }

    #[test]
    fn spoofed_response_is_accepted_by_reference_parser() {
        let q = build_dns_query(client(), resolver(), 0xBEEF, "api.test").unwrap();
        let ip: Ipv4Addr = "203.0.113.10".parse().unwrap();
        let resp = build_dns_response(&q, ip, DEFAULT_DNS_TTL).unwrap();
        assert_eq!(resp.dst(), client());
        assert_eq!(resp.src(), resolver());
        assert!(resp.checksums_valid());
        assert_eq!(parse_dns_answer(&resp).unwrap(), (0xBEEF, ip));

        let reference = Message::from_vec(&resp.payload).unwrap();
        assert_eq!(reference.metadata.id, 0xBEEF);
        assert_eq!(reference.answers.len(), 1);
        assert_eq!(reference.queries.len(), 1);
        let answer = &reference.answers[0];
        assert_eq!(answer.ttl, DEFAULT_DNS_TTL);
        match &answer.data {
            RData::A(a) => assert_eq!(a.0, ip),
            other => panic!("unexpected rdata {other:?}"),
        }
    }
}
