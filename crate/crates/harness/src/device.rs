//! Virtual end device: resolves the API host, connects, runs TLS and one GET
//! per request, and timestamps the stage boundaries.

use std::net::{Ipv4Addr, SocketAddrV4};

use lotls_core::packet_engine::{
    build_dns_query, parse_dns_answer, parse_packet, PacketView, TcpFlags, TcpHeader, TcpOption, Transport, DNS_PORT,
};
use lotls_core::SimTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::StageDelays;
use crate::tls::{TlsClientEnd, TlsFactory};

/// Address the device sends DNS queries to; the hub answers on its behalf.
pub const LAN_RESOLVER: Ipv4Addr = Ipv4Addr::new(192, 168, 4, 1);
const MSS: usize = 1460;
const SYN_ATTEMPTS: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutcome {
    pub index: usize,
    pub stages: StageDelays,
    pub body: Option<Vec<u8>>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub enum DeviceOutput {
    /// Packet onto the LAN.
    Packet(Vec<u8>),
    /// Call [`Device::on_timer`] with `token` at `at`.
    Timer {
        at: SimTime,
        token: u64,
    },
    Finished(RequestOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Resolving,
    Connecting,
    Established,
    Done,
}

struct Connection {
    index: usize,
    phase: Phase,
    dns_txid: u16,
    local: SocketAddrV4,
    remote: Option<SocketAddrV4>,
    isn: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    tsval: u32,
    syn_attempts: u32,
    syn_timer: u64,
    tls: Box<dyn TlsClientEnd>,
    dns_start: SimTime,
    dns_end: Option<SimTime>,
    syn_sent: Option<SimTime>,
    ack_sent: Option<SimTime>,
    tls_start: Option<SimTime>,
    tls_end: Option<SimTime>,
    access_end: Option<SimTime>,
}

impl Connection {
    fn stages(&self) -> StageDelays {
        let span = |a: Option<SimTime>, b: Option<SimTime>| Some(b?.saturating_since(a?).as_secs_f64());
        StageDelays {
            dns: span(Some(self.dns_start), self.dns_end),
            tcp: span(self.syn_sent, self.ack_sent),
            tls: span(self.tls_start, self.tls_end),
            access: span(self.tls_end, self.access_end),
        }
    }
}

pub struct Device {
    pub name: String,
    pub ip: Ipv4Addr,
    qname: String,
    server_port: u16,
    rng: ChaCha8Rng,
    clock_offset: u32,
    conn: Option<Connection>,
    next_token: u64,
}

impl Device {
    pub fn new(name: String, ip: Ipv4Addr, qname: String, server_port: u16, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clock_offset = rng.random();
        Device { name, ip, qname, server_port, rng, clock_offset, conn: None, next_token: 0 }
    }

    pub fn busy(&self) -> bool {
        self.conn.as_ref().is_some_and(|c| c.phase != Phase::Done)
    }

    fn clock(&self, now: SimTime) -> u32 {
        (now.as_millis() as u32).wrapping_add(self.clock_offset)
    }

    pub fn start_request(&mut self, index: usize, now: SimTime, tls: &TlsFactory) -> Vec<DeviceOutput> {
        let isn: u32 = self.rng.random();
        let dns_txid: u16 = self.rng.random();
        let local = SocketAddrV4::new(self.ip, 49152 + (index % 16000) as u16);
        let client = match tls.client(isn) {
            Ok(c) => c,
            Err(e) => return vec![self.fail_now(index, e.to_string())],
        };
        let query = build_dns_query(local, SocketAddrV4::new(LAN_RESOLVER, DNS_PORT), dns_txid, &self.qname);
        let query = match query {
            Ok(q) => q,
            Err(e) => return vec![self.fail_now(index, e.to_string())],
        };
        self.next_token += 1;
        self.conn = Some(Connection {
            index,
            phase: Phase::Resolving,
            dns_txid,
            local,
            remote: None,
            isn,
            snd_nxt: isn.wrapping_add(1),
            rcv_nxt: 0,
            tsval: 0,
            syn_attempts: 0,
            syn_timer: self.next_token,
            tls: client,
            dns_start: now,
            dns_end: None,
            syn_sent: None,
            ack_sent: None,
            tls_start: None,
            tls_end: None,
            access_end: None,
        });
        vec![DeviceOutput::Packet(query.raw)]
    }

    fn fail_now(&self, index: usize, error: String) -> DeviceOutput {
        DeviceOutput::Finished(RequestOutcome { index, stages: StageDelays::default(), body: None, error: Some(error) })
    }

    pub fn on_timer(&mut self, token: u64, now: SimTime) -> Vec<DeviceOutput> {
        let Some(conn) = self.conn.as_ref() else { return Vec::new() };
        if conn.phase != Phase::Connecting || conn.syn_timer != token {
            return Vec::new();
        }
        if conn.syn_attempts >= SYN_ATTEMPTS {
            return self.finish(Some("connection attempt timed out".into()));
        }
        self.send_syn(now)
    }

    fn send_syn(&mut self, now: SimTime) -> Vec<DeviceOutput> {
        self.next_token += 1;
        let token = self.next_token;
        let conn = self.conn.as_mut().expect("connection exists");
        let Some(remote) = conn.remote else { return Vec::new() };
        let mut header = TcpHeader::new(conn.isn, 0, TcpFlags::SYN);
        header.options = vec![
            TcpOption::mss(MSS as u16),
            TcpOption::sack_permitted(),
            TcpOption::timestamp(conn.tsval, 0),
            TcpOption::nop(),
            TcpOption::window_scale(7),
        ];
        let backoff = 1u64 << conn.syn_attempts;
        conn.syn_attempts += 1;
        conn.syn_timer = token;
        conn.syn_sent.get_or_insert(now);
        let mut out = Vec::new();
        if let Ok(syn) = PacketView::new_tcp(conn.local, remote, header, Vec::new()) {
            out.push(DeviceOutput::Packet(syn.raw));
        }
        out.push(DeviceOutput::Timer { at: now + std::time::Duration::from_secs(backoff), token });
        out
    }

    pub fn on_packet(&mut self, bytes: &[u8], now: SimTime) -> Vec<DeviceOutput> {
        let Ok(packet) = parse_packet(bytes) else { return Vec::new() };
        let Some(phase) = self.conn.as_ref().map(|c| c.phase) else { return Vec::new() };
        match (&packet.transport, phase) {
            (Transport::Udp, Phase::Resolving) if packet.src_port == DNS_PORT => self.on_dns_answer(&packet, now),
            (Transport::Tcp(header), Phase::Connecting | Phase::Established) => {
                let header = header.clone();
                let conn = self.conn.as_ref().expect("connection exists");
                if Some(packet.src()) != conn.remote || packet.dst() != conn.local {
                    return Vec::new();
                }
                if header.flags.contains(TcpFlags::RST) {
                    return self.finish(Some("connection reset".into()));
                }
                if phase == Phase::Connecting {
                    if header.flags.contains(TcpFlags::SYN | TcpFlags::ACK) {
                        return self.on_syn_ack(&header, now);
                    }
                    if header.flags.contains(TcpFlags::FIN) {
                        return self.finish(Some("connection refused by the hub".into()));
                    }
                    return Vec::new();
                }
                self.on_segment(&packet, &header, now)
            }
            _ => Vec::new(),
        }
    }

    fn on_dns_answer(&mut self, packet: &PacketView, now: SimTime) -> Vec<DeviceOutput> {
        let Ok((txid, ip)) = parse_dns_answer(packet) else { return Vec::new() };
        let server_port = self.server_port;
        let tsval = self.clock(now);
        let conn = self.conn.as_mut().expect("connection exists");
        if txid != conn.dns_txid {
            return Vec::new();
        }
        conn.dns_end = Some(now);
        conn.remote = Some(SocketAddrV4::new(ip, server_port));
        conn.tsval = tsval;
        conn.phase = Phase::Connecting;
        self.send_syn(now)
    }

    fn on_syn_ack(&mut self, header: &TcpHeader, now: SimTime) -> Vec<DeviceOutput> {
        let tsval_now = self.clock(now);
        let conn = self.conn.as_mut().expect("connection exists");
        if header.ack_no != conn.isn.wrapping_add(1) {
            return Vec::new();
        }
        let remote = conn.remote.expect("connecting has a remote");
        let peer_tsval = header.timestamp().map(|(tsval, _)| tsval);
        if let Some((_, tsecr)) = header.timestamp().filter(|&(_, tsecr)| tsecr != conn.tsval) {
            // the echo does not match our SYN; a real stack drops the connection
            let sent = conn.tsval;
            let rst = TcpHeader::new(conn.snd_nxt, 0, TcpFlags::RST);
            let mut out: Vec<DeviceOutput> = PacketView::new_tcp(conn.local, remote, rst, Vec::new())
                .map(|p| DeviceOutput::Packet(p.raw))
                .into_iter()
                .collect();
            out.extend(self.finish(Some(format!("SYN-ACK echoes timestamp {tsecr}, SYN carried {sent}"))));
            return out;
        }
        conn.rcv_nxt = header.seq.wrapping_add(1);
        conn.phase = Phase::Established;
        let mut ack = TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::ACK);
        if let Some(echo) = peer_tsval {
            ack.options = vec![TcpOption::nop(), TcpOption::nop(), TcpOption::timestamp(tsval_now, echo)];
        }
        let mut out = Vec::new();
        if let Ok(p) = PacketView::new_tcp(conn.local, remote, ack, Vec::new()) {
            out.push(DeviceOutput::Packet(p.raw));
        }
        conn.ack_sent = Some(now);
        conn.tls_start = Some(now);
        match conn.tls.start() {
            Ok(hello) => out.extend(self.send_data(hello)),
            Err(e) => out.extend(self.finish(Some(e.to_string()))),
        }
        out
    }

    fn on_segment(&mut self, packet: &PacketView, header: &TcpHeader, now: SimTime) -> Vec<DeviceOutput> {
        let conn = self.conn.as_mut().expect("connection exists");
        let mut out = Vec::new();
        if !packet.payload.is_empty() && header.seq == conn.rcv_nxt {
            conn.rcv_nxt = conn.rcv_nxt.wrapping_add(packet.payload.len() as u32);
            let reply = match conn.tls.on_bytes(&packet.payload) {
                Ok(r) => r,
                Err(e) => return self.finish(Some(e.to_string())),
            };
            if conn.tls.handshake_complete() && conn.tls_end.is_none() {
                conn.tls_end = Some(now);
            }
            let done = conn.tls.body().is_some();
            if done {
                conn.access_end = Some(now);
            }
            out.extend(self.send_data(reply));
            if done {
                out.extend(self.close());
                out.extend(self.finish(None));
                return out;
            }
        }
        if header.flags.contains(TcpFlags::FIN) {
            out.extend(self.finish(Some("connection closed before the response completed".into())));
        }
        out
    }

    fn send_data(&mut self, data: Vec<u8>) -> Vec<DeviceOutput> {
        let conn = self.conn.as_mut().expect("connection exists");
        let Some(remote) = conn.remote else { return Vec::new() };
        let mut out = Vec::new();
        for piece in data.chunks(MSS) {
            let header = TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::PSH | TcpFlags::ACK);
            if let Ok(p) = PacketView::new_tcp(conn.local, remote, header, piece.to_vec()) {
                out.push(DeviceOutput::Packet(p.raw));
            }
            conn.snd_nxt = conn.snd_nxt.wrapping_add(piece.len() as u32);
        }
        out
    }

    fn close(&mut self) -> Vec<DeviceOutput> {
        let conn = self.conn.as_mut().expect("connection exists");
        let Some(remote) = conn.remote else { return Vec::new() };
        let header = TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::FIN | TcpFlags::ACK);
        conn.snd_nxt = conn.snd_nxt.wrapping_add(1);
        PacketView::new_tcp(conn.local, remote, header, Vec::new())
            .map(|p| DeviceOutput::Packet(p.raw))
            .into_iter()
            .collect()
    }

    fn finish(&mut self, error: Option<String>) -> Vec<DeviceOutput> {
        let Some(conn) = self.conn.as_mut() else { return Vec::new() };
        if conn.phase == Phase::Done {
            return Vec::new();
        }
        conn.phase = Phase::Done;
        vec![DeviceOutput::Finished(RequestOutcome {
            index: conn.index,
            stages: conn.stages(),
            body: conn.tls.body().map(<[u8]>::to_vec),
            error,
        })]
    }
}
