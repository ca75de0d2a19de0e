//! IPv4 packets with TCP or UDP on top: parsing, building, and the few
//! in-place rewrites the proxies need (NAT, TCP timestamp echo), plus DNS
//! and TLS record framing.
//!
//! Rewrites patch the original bytes and then recompute checksums, so a
//! rewrite changes only the fields it targets and the checksum fields.

mod checksum;
mod dns;
mod tls;

use std::net::{Ipv4Addr, SocketAddrV4};

use bitflags::bitflags;
use thiserror::Error;

pub use checksum::{internet_checksum, transport_checksum};
pub use dns::{
    build_dns_query, build_dns_response, extract_dns_query, parse_dns_answer, DnsQuery, DEFAULT_DNS_TTL, DNS_PORT,
};
pub use tls::{tls_record_scan, TlsRecordBuffer, TlsRecordHeader, MAX_TLS_RECORD_BODY, TLS_HEADER_LEN};

pub const IPV4_MIN_HEADER: usize = 20;
pub const TCP_MIN_HEADER: usize = 20;
pub const UDP_HEADER: usize = 8;
const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;
const TCP_OPT_EOL: u8 = 0;
const TCP_OPT_NOP: u8 = 1;
pub const TCP_OPT_MSS: u8 = 2;
pub const TCP_OPT_WINDOW_SCALE: u8 = 3;
pub const TCP_OPT_SACK_PERMITTED: u8 = 4;
pub const TCP_OPT_TIMESTAMP: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("not an IPv4 packet (version {0})")]
    NotIpv4(u8),
    #[error("unsupported IP protocol {0}")]
    UnsupportedProtocol(u8),
    #[error("fragmented IPv4 packets are not supported")]
    Fragmented,
    #[error("packet addresses do not match the NAT mapping")]
    MappingMismatch,
    #[error("NAT mapping uses port 0")]
    InvalidMapping,
    #[error("TCP segment has no timestamp option")]
    NoTimestampOption,
    #[error("segment is not a SYN-ACK")]
    NotSynAck,
    #[error("not a DNS query")]
    NotDns,
    #[error("unsupported DNS query type {0}")]
    UnsupportedQtype(u16),
    #[error("byte stream is not TLS record framing")]
    NotTlsFraming,
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
        const URG = 0x20;
        const ECE = 0x40;
        const CWR = 0x80;
    }
}

/// One TCP option. NOP is kept as an option with empty data; EOL and the
/// padding after it are not represented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpOption {
    pub kind: u8,
    pub data: Vec<u8>,
}

impl TcpOption {
    pub fn nop() -> Self {
        TcpOption { kind: TCP_OPT_NOP, data: Vec::new() }
    }

    pub fn mss(mss: u16) -> Self {
        TcpOption { kind: TCP_OPT_MSS, data: mss.to_be_bytes().to_vec() }
    }

    pub fn window_scale(shift: u8) -> Self {
        TcpOption { kind: TCP_OPT_WINDOW_SCALE, data: vec![shift] }
    }

    pub fn sack_permitted() -> Self {
        TcpOption { kind: TCP_OPT_SACK_PERMITTED, data: Vec::new() }
    }

    pub fn timestamp(tsval: u32, tsecr: u32) -> Self {
        let mut data = tsval.to_be_bytes().to_vec();
        data.extend_from_slice(&tsecr.to_be_bytes());
        TcpOption { kind: TCP_OPT_TIMESTAMP, data }
    }

    fn encoded_len(&self) -> usize {
        if self.kind == TCP_OPT_NOP {
            1
        } else {
            2 + self.data.len()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpHeader {
    pub seq: u32,
    pub ack_no: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub urgent: u16,
    pub options: Vec<TcpOption>,
}

impl TcpHeader {
    pub fn new(seq: u32, ack_no: u32, flags: TcpFlags) -> Self {
        TcpHeader { seq, ack_no, flags, window: 65535, urgent: 0, options: Vec::new() }
    }

    /// `(TSval, TSecr)` from the timestamp option.
    pub fn timestamp(&self) -> Option<(u32, u32)> {
        self.options.iter().find(|o| o.kind == TCP_OPT_TIMESTAMP && o.data.len() == 8).map(|o| {
            (
                u32::from_be_bytes(o.data[..4].try_into().expect("4 bytes")),
                u32::from_be_bytes(o.data[4..].try_into().expect("4 bytes")),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Tcp(TcpHeader),
    Udp,
}

/// Structured view of an IPv4 packet. `raw` holds the bytes the view was
/// parsed from; [`build_packet`] serializes the fields instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketView {
    pub dscp_ecn: u8,
    pub identification: u16,
    /// The three IPv4 flag bits (reserved, DF, MF).
    pub ip_flags: u8,
    pub ttl: u8,
    pub ip_options: Vec<u8>,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
    pub payload: Vec<u8>,
    pub raw: Vec<u8>,
}

const IP_FLAG_DF: u8 = 0b010;
const IP_FLAG_MF: u8 = 0b001;

impl PacketView {
    fn template(src: SocketAddrV4, dst: SocketAddrV4, transport: Transport, payload: Vec<u8>) -> Self {
        PacketView {
            dscp_ecn: 0,
            identification: 0,
            ip_flags: IP_FLAG_DF,
            ttl: 64,
            ip_options: Vec::new(),
            src_ip: *src.ip(),
            dst_ip: *dst.ip(),
            src_port: src.port(),
            dst_port: dst.port(),
            transport,
            payload,
            raw: Vec::new(),
        }
    }

    /// A TCP segment with default IP fields, serialized.
    pub fn new_tcp(
        src: SocketAddrV4,
        dst: SocketAddrV4,
        header: TcpHeader,
        payload: Vec<u8>,
    ) -> Result<Self, PacketError> {
        Self::template(src, dst, Transport::Tcp(header), payload).rebuilt()
    }

    /// A UDP datagram with default IP fields, serialized.
    pub fn new_udp(src: SocketAddrV4, dst: SocketAddrV4, payload: Vec<u8>) -> Result<Self, PacketError> {
        Self::template(src, dst, Transport::Udp, payload).rebuilt()
    }

    /// Re-serializes the fields, replacing `raw`.
    pub fn rebuilt(mut self) -> Result<Self, PacketError> {
        self.raw = build_packet(&self)?;
        Ok(self)
    }

    pub fn protocol(&self) -> Protocol {
        match self.transport {
            Transport::Tcp(_) => Protocol::Tcp,
            Transport::Udp => Protocol::Udp,
        }
    }

    pub fn tcp(&self) -> Option<&TcpHeader> {
        match &self.transport {
            Transport::Tcp(h) => Some(h),
            Transport::Udp => None,
        }
    }

    pub fn tcp_flags(&self) -> TcpFlags {
        self.tcp().map(|h| h.flags).unwrap_or_default()
    }

    pub fn src(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.src_ip, self.src_port)
    }

    pub fn dst(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.dst_ip, self.dst_port)
    }

    /// True when both the IPv4 header checksum and the transport checksum
    /// of `raw` verify.
    pub fn checksums_valid(&self) -> bool {
        checksums_valid(&self.raw)
    }

    fn ip_header_len(&self) -> usize {
        IPV4_MIN_HEADER + self.ip_options.len()
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn ipv4(b: &[u8], at: usize) -> Ipv4Addr {
    Ipv4Addr::new(b[at], b[at + 1], b[at + 2], b[at + 3])
}

pub fn parse_packet(bytes: &[u8]) -> Result<PacketView, PacketError> {
    if bytes.len() < IPV4_MIN_HEADER {
        return Err(PacketError::Malformed("shorter than an IPv4 header"));
    }
    let version = bytes[0] >> 4;
    if version != 4 {
        return Err(PacketError::NotIpv4(version));
    }
    let ihl = usize::from(bytes[0] & 0x0F) * 4;
    if ihl < IPV4_MIN_HEADER || ihl > bytes.len() {
        return Err(PacketError::Malformed("bad IHL"));
    }
    if usize::from(be16(bytes, 2)) != bytes.len() {
        return Err(PacketError::Malformed("total length does not match buffer"));
    }
    let flags_fragment = be16(bytes, 6);
    let ip_flags = (flags_fragment >> 13) as u8;
    if ip_flags & IP_FLAG_MF != 0 || flags_fragment & 0x1FFF != 0 {
        return Err(PacketError::Fragmented);
    }
    let segment = &bytes[ihl..];
    let (transport, src_port, dst_port, payload) = match bytes[9] {
        PROTO_TCP => {
            let (header, sport, dport, data_offset) = parse_tcp(segment)?;
            (Transport::Tcp(header), sport, dport, segment[data_offset..].to_vec())
        }
        PROTO_UDP => {
            if segment.len() < UDP_HEADER {
                return Err(PacketError::Malformed("truncated UDP header"));
            }
            if usize::from(be16(segment, 4)) != segment.len() {
                return Err(PacketError::Malformed("UDP length does not match IP payload"));
            }
            (Transport::Udp, be16(segment, 0), be16(segment, 2), segment[UDP_HEADER..].to_vec())
        }
        other => return Err(PacketError::UnsupportedProtocol(other)),
    };
    Ok(PacketView {
        dscp_ecn: bytes[1],
        identification: be16(bytes, 4),
        ip_flags,
        ttl: bytes[8],
        ip_options: bytes[IPV4_MIN_HEADER..ihl].to_vec(),
        src_ip: ipv4(bytes, 12),
        dst_ip: ipv4(bytes, 16),
        src_port,
        dst_port,
        transport,
        payload,
        raw: bytes.to_vec(),
    })
}

fn parse_tcp(segment: &[u8]) -> Result<(TcpHeader, u16, u16, usize), PacketError> {
    if segment.len() < TCP_MIN_HEADER {
        return Err(PacketError::Malformed("truncated TCP header"));
    }
    let data_offset = usize::from(segment[12] >> 4) * 4;
    if data_offset < TCP_MIN_HEADER || data_offset > segment.len() {
        return Err(PacketError::Malformed("bad TCP data offset"));
    }
    let options = parse_tcp_options(&segment[TCP_MIN_HEADER..data_offset])?;
    let header = TcpHeader {
        seq: be32(segment, 4),
        ack_no: be32(segment, 8),
        flags: TcpFlags::from_bits_retain(segment[13]),
        window: be16(segment, 14),
        urgent: be16(segment, 18),
        options,
    };
    Ok((header, be16(segment, 0), be16(segment, 2), data_offset))
}

fn parse_tcp_options(mut area: &[u8]) -> Result<Vec<TcpOption>, PacketError> {
    let mut options = Vec::new();
    while let Some(&kind) = area.first() {
        match kind {
            TCP_OPT_EOL => break,
            TCP_OPT_NOP => {
                options.push(TcpOption::nop());
                area = &area[1..];
            }
            _ => {
                let len = usize::from(*area.get(1).ok_or(PacketError::Malformed("truncated TCP option"))?);
                if len < 2 || len > area.len() {
                    return Err(PacketError::Malformed("bad TCP option length"));
                }
                options.push(TcpOption { kind, data: area[2..len].to_vec() });
                area = &area[len..];
            }
        }
    }
    Ok(options)
}

/// Serializes the fields of `view` (ignoring `view.raw`) with fresh
/// lengths and checksums.
pub fn build_packet(view: &PacketView) -> Result<Vec<u8>, PacketError> {
    if !view.ip_options.len().is_multiple_of(4) || view.ip_options.len() > 40 {
        return Err(PacketError::Malformed("IP options must be a multiple of 4 bytes, at most 40"));
    }
    let ihl = view.ip_header_len();
    let mut segment = match &view.transport {
        Transport::Tcp(h) => build_tcp_header(view, h)?,
        Transport::Udp => {
            let mut s = Vec::with_capacity(UDP_HEADER);
            s.extend_from_slice(&view.src_port.to_be_bytes());
            s.extend_from_slice(&view.dst_port.to_be_bytes());
            let len = u16::try_from(UDP_HEADER + view.payload.len())
                .map_err(|_| PacketError::Malformed("datagram too long"))?;
            s.extend_from_slice(&len.to_be_bytes());
            s.extend_from_slice(&[0, 0]);
            s
        }
    };
    segment.extend_from_slice(&view.payload);
    let total = u16::try_from(ihl + segment.len()).map_err(|_| PacketError::Malformed("packet too long"))?;

    let mut out = Vec::with_capacity(usize::from(total));
    out.push(0x40 | (ihl / 4) as u8);
    out.push(view.dscp_ecn);
    out.extend_from_slice(&total.to_be_bytes());
    out.extend_from_slice(&view.identification.to_be_bytes());
    out.extend_from_slice(&(u16::from(view.ip_flags & 0b111) << 13).to_be_bytes());
    out.push(view.ttl);
    out.push(match view.transport {
        Transport::Tcp(_) => PROTO_TCP,
        Transport::Udp => PROTO_UDP,
    });
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&view.src_ip.octets());
    out.extend_from_slice(&view.dst_ip.octets());
    out.extend_from_slice(&view.ip_options);
    out.extend_from_slice(&segment);
    refresh_checksums(&mut out);
    Ok(out)
}

fn build_tcp_header(view: &PacketView, h: &TcpHeader) -> Result<Vec<u8>, PacketError> {
    let mut options = Vec::new();
    for opt in &h.options {
        if opt.kind == TCP_OPT_NOP {
            options.push(TCP_OPT_NOP);
        } else {
            let len = u8::try_from(opt.encoded_len()).map_err(|_| PacketError::Malformed("TCP option too long"))?;
            options.push(opt.kind);
            options.push(len);
            options.extend_from_slice(&opt.data);
        }
    }
    while options.len() % 4 != 0 {
        options.push(TCP_OPT_EOL);
    }
    if options.len() > 40 {
        return Err(PacketError::Malformed("TCP options exceed 40 bytes"));
    }
    let data_offset = TCP_MIN_HEADER + options.len();
    let mut s = Vec::with_capacity(data_offset);
    s.extend_from_slice(&view.src_port.to_be_bytes());
    s.extend_from_slice(&view.dst_port.to_be_bytes());
    s.extend_from_slice(&h.seq.to_be_bytes());
    s.extend_from_slice(&h.ack_no.to_be_bytes());
    s.push(((data_offset / 4) as u8) << 4);
    s.push(h.flags.bits());
    s.extend_from_slice(&h.window.to_be_bytes());
    s.extend_from_slice(&[0, 0]);
    s.extend_from_slice(&h.urgent.to_be_bytes());
    s.extend_from_slice(&options);
    Ok(s)
}

/// Offset of the transport checksum field in a well-formed packet.
fn transport_checksum_at(raw: &[u8]) -> usize {
    let ihl = usize::from(raw[0] & 0x0F) * 4;
    ihl + if raw[9] == PROTO_TCP { 16 } else { 6 }
}

/// Recomputes the IPv4 header checksum and the transport checksum in place.
fn refresh_checksums(raw: &mut [u8]) {
    refresh_ip_checksum(raw);
    refresh_transport_checksum(raw);
}

fn refresh_ip_checksum(raw: &mut [u8]) {
    let ihl = usize::from(raw[0] & 0x0F) * 4;
    raw[10..12].fill(0);
    let sum = internet_checksum(&raw[..ihl]);
    raw[10..12].copy_from_slice(&sum.to_be_bytes());
}

fn refresh_transport_checksum(raw: &mut [u8]) {
    let ihl = usize::from(raw[0] & 0x0F) * 4;
    let at = transport_checksum_at(raw);
    raw[at..at + 2].fill(0);
    let mut sum = transport_checksum(ipv4(raw, 12), ipv4(raw, 16), raw[9], &raw[ihl..]);
    if raw[9] == PROTO_UDP && sum == 0 {
        sum = 0xFFFF;
    }
    raw[at..at + 2].copy_from_slice(&sum.to_be_bytes());
}

fn checksums_valid(raw: &[u8]) -> bool {
    let Ok(view) = parse_packet(raw) else { return false };
    let ihl = view.ip_header_len();
    if internet_checksum(&raw[..ihl]) != 0 {
        return false;
    }
    let at = transport_checksum_at(raw);
    if view.protocol() == Protocol::Udp && raw[at..at + 2] == [0, 0] {
        return true;
    }
    transport_checksum(view.src_ip, view.dst_ip, raw[9], &raw[ihl..]) == 0
}

/// Applies `edit` to a copy of the raw bytes, refreshes checksums and
/// re-parses.
fn patch(view: &PacketView, edit: impl FnOnce(&mut [u8])) -> Result<PacketView, PacketError> {
    let mut raw = view.raw.clone();
    let udp_without_checksum = view.protocol() == Protocol::Udp && raw[transport_checksum_at(&raw)..][..2] == [0, 0];
    edit(&mut raw);
    refresh_ip_checksum(&mut raw);
    // a UDP datagram sent without a checksum stays without one
    if !udp_without_checksum {
        refresh_transport_checksum(&mut raw);
    }
    parse_packet(&raw)
}

/// Address translation state for one relayed connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NatMapping {
    pub client_ip: Ipv4Addr,
    pub client_port: u16,
    pub relay_ip: Ipv4Addr,
    pub relay_port: u16,
}

impl NatMapping {
    pub fn client(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.client_ip, self.client_port)
    }

    pub fn relay(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.relay_ip, self.relay_port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NatDirection {
    /// Client toward server: source becomes the relay address.
    Outbound,
    /// Server toward client: destination becomes the client address.
    Inbound,
}

pub fn nat_rewrite(
    packet: &PacketView,
    mapping: &NatMapping,
    direction: NatDirection,
) -> Result<PacketView, PacketError> {
    if mapping.client_port == 0 || mapping.relay_port == 0 {
        return Err(PacketError::InvalidMapping);
    }
    let ihl = packet.ip_header_len();
    let (expected, replacement, ip_at, port_at) = match direction {
        NatDirection::Outbound => (mapping.client(), mapping.relay(), 12, ihl),
        NatDirection::Inbound => (mapping.relay(), mapping.client(), 16, ihl + 2),
    };
    let current = match direction {
        NatDirection::Outbound => packet.src(),
        NatDirection::Inbound => packet.dst(),
    };
    if current != expected {
        return Err(PacketError::MappingMismatch);
    }
    patch(packet, |raw| {
        raw[ip_at..ip_at + 4].copy_from_slice(&replacement.ip().octets());
        raw[port_at..port_at + 2].copy_from_slice(&replacement.port().to_be_bytes());
    })
}

/// Byte offset in `raw` of the timestamp option's kind byte.
fn timestamp_option_at(packet: &PacketView) -> Option<usize> {
    let Transport::Tcp(_) = packet.transport else { return None };
    let start = packet.ip_header_len();
    let raw = &packet.raw;
    let data_offset = usize::from(raw[start + 12] >> 4) * 4;
    let mut at = start + TCP_MIN_HEADER;
    let end = start + data_offset;
    while at < end {
        match raw[at] {
            TCP_OPT_EOL => return None,
            TCP_OPT_NOP => at += 1,
            kind => {
                let len = usize::from(raw[at + 1]);
                if kind == TCP_OPT_TIMESTAMP && len == 10 {
                    return Some(at);
                }
                at += len;
            }
        }
    }
    None
}

/// Overwrites TSval and/or TSecr of the timestamp option.
pub fn rewrite_timestamp(
    packet: &PacketView,
    tsval: Option<u32>,
    tsecr: Option<u32>,
) -> Result<PacketView, PacketError> {
    let at = timestamp_option_at(packet).ok_or(PacketError::NoTimestampOption)?;
    patch(packet, |raw| {
        if let Some(v) = tsval {
            raw[at + 2..at + 6].copy_from_slice(&v.to_be_bytes());
        }
        if let Some(v) = tsecr {
            raw[at + 6..at + 10].copy_from_slice(&v.to_be_bytes());
        }
    })
}

/// Sets the SYN-ACK's TSecr to the TSval the client put in its SYN.
pub fn correct_syn_ack_timestamp(syn_ack: &PacketView, tsval_orig: u32) -> Result<PacketView, PacketError> {
    if !syn_ack.tcp_flags().contains(TcpFlags::SYN | TcpFlags::ACK) {
        return Err(PacketError::NotSynAck);
    }
    rewrite_timestamp(syn_ack, None, Some(tsval_orig))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> SocketAddrV4 {
        s.parse().unwrap()
    }

    fn syn_with_options() -> PacketView {
        let mut h = TcpHeader::new(1000, 0, TcpFlags::SYN);
        h.options = vec![
            TcpOption::mss(1460),
            TcpOption::sack_permitted(),
            TcpOption::timestamp(100, 0),
            TcpOption::nop(),
            TcpOption::window_scale(7),
        ];
        PacketView::new_tcp(addr("192.168.4.2:50000"), addr("203.0.113.10:443"), h, Vec::new()).unwrap()
    }

    #[test]
    fn minimal_syn_is_forty_bytes() {
        let syn = PacketView::new_tcp(
            addr("192.168.4.2:50000"),
            addr("203.0.113.10:443"),
            TcpHeader::new(1, 0, TcpFlags::SYN),
            Vec::new(),
        )
        .unwrap();
        assert_eq!(syn.raw.len(), 40);
        let parsed = parse_packet(&syn.raw).unwrap();
        assert_eq!(parsed.tcp_flags(), TcpFlags::SYN);
        assert!(parsed.payload.is_empty());
        assert!(parsed.checksums_valid());
        assert_eq!(parsed, syn);
    }

    #[test]
    fn timestamp_option_is_exposed() {
        let syn = syn_with_options();
        let parsed = parse_packet(&syn.raw).unwrap();
        let ts = parsed.tcp().unwrap().options.iter().find(|o| o.kind == TCP_OPT_TIMESTAMP).unwrap();
        assert_eq!(ts.data, [0, 0, 0, 100, 0, 0, 0, 0]);
        assert_eq!(parsed.tcp().unwrap().timestamp(), Some((100, 0)));
    }

    #[test]
    fn short_and_foreign_packets_rejected() {
        assert!(matches!(parse_packet(&[0x45; 19]), Err(PacketError::Malformed(_))));
        let mut v6 = syn_with_options().raw;
        v6[0] = 0x60;
        assert_eq!(parse_packet(&v6), Err(PacketError::NotIpv4(6)));
        let mut icmp = syn_with_options().raw;
        icmp[9] = 1;
        assert_eq!(parse_packet(&icmp), Err(PacketError::UnsupportedProtocol(1)));
        let mut truncated = syn_with_options().raw;
        truncated.pop();
        assert!(matches!(parse_packet(&truncated), Err(PacketError::Malformed(_))));
    }

    #[test]
    fn nat_round_trip_restores_addresses() {
        let mapping = NatMapping {
            client_ip: "192.168.4.2".parse().unwrap(),
            client_port: 50000,
            relay_ip: "10.0.0.5".parse().unwrap(),
            relay_port: 41000,
        };
        let syn = syn_with_options();
        let out = nat_rewrite(&syn, &mapping, NatDirection::Outbound).unwrap();
        assert_eq!(out.src(), addr("10.0.0.5:41000"));
        assert_eq!(out.dst(), syn.dst());
        assert!(out.checksums_valid());

        let mut reply = out.clone();
        std::mem::swap(&mut reply.src_ip, &mut reply.dst_ip);
        std::mem::swap(&mut reply.src_port, &mut reply.dst_port);
        let reply = reply.rebuilt().unwrap();
        let back = nat_rewrite(&reply, &mapping, NatDirection::Inbound).unwrap();
        assert_eq!(back.dst(), syn.src());
        assert!(back.checksums_valid());

        let stranger = PacketView::new_tcp(
            addr("192.168.4.9:1"),
            addr("203.0.113.10:443"),
            TcpHeader::new(0, 0, TcpFlags::SYN),
            vec![],
        )
        .unwrap();
        assert_eq!(nat_rewrite(&stranger, &mapping, NatDirection::Outbound), Err(PacketError::MappingMismatch));
    }

    #[test]
    fn syn_ack_timestamp_correction() {
        let mut h = TcpHeader::new(9000, 1001, TcpFlags::SYN | TcpFlags::ACK);
        h.options = vec![TcpOption::mss(1460), TcpOption::nop(), TcpOption::nop(), TcpOption::timestamp(777, 5000)];
        let syn_ack = PacketView::new_tcp(addr("203.0.113.10:443"), addr("192.168.4.2:50000"), h, vec![]).unwrap();
        let fixed = correct_syn_ack_timestamp(&syn_ack, 100).unwrap();
        assert_eq!(fixed.tcp().unwrap().timestamp(), Some((777, 100)));
        assert!(fixed.checksums_valid());
        let changed: Vec<usize> = (0..fixed.raw.len()).filter(|&i| fixed.raw[i] != syn_ack.raw[i]).collect();
        assert!(changed.iter().all(|&i| (36..38).contains(&i) || (54..58).contains(&i)), "{changed:?}");

        let bare = PacketView::new_tcp(
            addr("1.1.1.1:1"),
            addr("2.2.2.2:2"),
            TcpHeader::new(0, 1, TcpFlags::SYN | TcpFlags::ACK),
            vec![],
        )
        .unwrap();
        assert_eq!(correct_syn_ack_timestamp(&bare, 1), Err(PacketError::NoTimestampOption));
        assert_eq!(correct_syn_ack_timestamp(&syn_with_options(), 1), Err(PacketError::NotSynAck));
    }

    #[test]
    fn udp_round_trip() {
        let dgram = PacketView::new_udp(addr("192.168.4.2:5353"), addr("192.168.4.1:53"), b"hello".to_vec()).unwrap();
        assert_eq!(dgram.raw.len(), 20 + 8 + 5);
        let parsed = parse_packet(&dgram.raw).unwrap();
        assert_eq!(parsed, dgram);
        assert!(parsed.checksums_valid());
    }
}
