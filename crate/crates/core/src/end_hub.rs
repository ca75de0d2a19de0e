//! Client-side proxy.
//!
//! [`eh_step`] is the pure transition table. [`EndHub`] is the runtime that
//! sniffs LAN packets, consults the [`SentinelState`] on every new SYN, runs
//! one FSM per session and moves messages over its radio [`Endpoint`]. It
//! is sans-IO: the owner feeds packets, frames and timer expirations in and
//! collects [`EhOutput`]s and frames to transmit.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::endpoint::{Endpoint, EndpointEvent, EndpointStats, Outgoing};
use crate::frame_codec::{FrameError, MessageKind, PayloadMessage, RetryPolicy, L_MAX};
use crate::packet_engine::{
    build_dns_response, extract_dns_query, parse_packet, PacketError, PacketView, TcpFlags, TcpHeader, TlsRecordBuffer,
    Transport, DEFAULT_DNS_TTL, DNS_PORT,
};
use crate::sentinel::{Decision, SentinelConfig, SentinelError, SentinelState};
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EhState {
    Idle,
    WaitDnsResp,
    WaitSynAck,
    TlsRelay,
    Error,
}

impl EhState {
    pub const ALL: [EhState; 5] =
        [EhState::Idle, EhState::WaitDnsResp, EhState::WaitSynAck, EhState::TlsRelay, EhState::Error];

    pub fn label(self) -> &'static str {
        match self {
            EhState::Idle => "C0_IDLE",
            EhState::WaitDnsResp => "C1_WAIT_DNS_RESP",
            EhState::WaitSynAck => "C2_WAIT_SYN_ACK",
            EhState::TlsRelay => "C3_TLS_RELAY",
            EhState::Error => "C4_ERROR",
        }
    }
}

impl fmt::Display for EhState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Event identity without payload, one per input symbol of the FSM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EhEventKind {
    DnsQuery,
    DnsIpResp,
    LocalSyn,
    SynAckReceived,
    SynAckTimeout,
    LocalTlsOut,
    LoraTlsIn,
    LoraFragAck,
    SessionEnd,
}

impl EhEventKind {
    pub const ALL: [EhEventKind; 9] = [
        EhEventKind::DnsQuery,
        EhEventKind::DnsIpResp,
        EhEventKind::LocalSyn,
        EhEventKind::SynAckReceived,
        EhEventKind::SynAckTimeout,
        EhEventKind::LocalTlsOut,
        EhEventKind::LoraTlsIn,
        EhEventKind::LoraFragAck,
        EhEventKind::SessionEnd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EhEventKind::DnsQuery => "E0_DNS_QUERY",
            EhEventKind::DnsIpResp => "E1_DNS_IP_RESP",
            EhEventKind::LocalSyn => "E2_LOCAL_SYN",
            EhEventKind::SynAckReceived => "E3_SYNACK_RECVD",
            EhEventKind::SynAckTimeout => "E4_SYNACK_TIMEOUT",
            EhEventKind::LocalTlsOut => "E5_LOCAL_TLS_OUT",
            EhEventKind::LoraTlsIn => "E6_LORA_TLS_IN",
            EhEventKind::LoraFragAck => "E7_LORA_FRAG_ACK",
            EhEventKind::SessionEnd => "E8_SESSION_END",
        }
    }
}

/// Why a session is ending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    ClientFin,
    ClientReset,
    PeerFin,
    PeerError,
    SendFailed,
    StreamCorrupt,
    Superseded,
}

impl EndReason {
    /// True when the relay side already knows the session is over.
    fn peer_initiated(self) -> bool {
        matches!(self, EndReason::PeerFin | EndReason::PeerError)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EhEvent {
    DnsQuery { qname: String },
    DnsIpResp { ip: Ipv4Addr },
    LocalSyn { packet: Vec<u8> },
    SynAckReceived { packet: Vec<u8> },
    SynAckTimeout,
    LocalTlsOut { data: Vec<u8> },
    LoraTlsIn { data: Vec<u8> },
    LoraFragAck { payload_id: u16, chunk_index: u8 },
    SessionEnd { reason: EndReason },
}

impl EhEvent {
    pub fn kind(&self) -> EhEventKind {
        match self {
            EhEvent::DnsQuery { .. } => EhEventKind::DnsQuery,
            EhEvent::DnsIpResp { .. } => EhEventKind::DnsIpResp,
            EhEvent::LocalSyn { .. } => EhEventKind::LocalSyn,
            EhEvent::SynAckReceived { .. } => EhEventKind::SynAckReceived,
            EhEvent::SynAckTimeout => EhEventKind::SynAckTimeout,
            EhEvent::LocalTlsOut { .. } => EhEventKind::LocalTlsOut,
            EhEvent::LoraTlsIn { .. } => EhEventKind::LoraTlsIn,
            EhEvent::LoraFragAck { .. } => EhEventKind::LoraFragAck,
            EhEvent::SessionEnd { .. } => EhEventKind::SessionEnd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EhAction {
    /// Queue a message for the relay.
    SendLora {
        kind: MessageKind,
        data: Vec<u8>,
    },
    SpoofDnsResponse {
        ip: Ipv4Addr,
    },
    /// Hand the SYN-ACK to the client and relay the client's final ACK.
    SendFinalAck {
        syn_ack: Vec<u8>,
    },
    SendFinAckToClient,
    LogError {
        reason: String,
    },
    ChunkAndSend {
        data: Vec<u8>,
    },
    ReassembleAndForward {
        data: Vec<u8>,
    },
    Cleanup,
}

impl EhAction {
    pub fn label(&self) -> String {
        match self {
            EhAction::SendLora { kind, .. } => format!("SendLora({kind})"),
            EhAction::SpoofDnsResponse { ip } => format!("SpoofDnsResponse({ip})"),
            EhAction::SendFinalAck { .. } => "SendFinalAck".into(),
            EhAction::SendFinAckToClient => "SendFinAckToClient".into(),
            EhAction::LogError { reason } => format!("LogError({reason})"),
            EhAction::ChunkAndSend { data } => format!("ChunkAndSend({}B)", data.len()),
            EhAction::ReassembleAndForward { data } => format!("ReassembleAndForward({}B)", data.len()),
            EhAction::Cleanup => "Cleanup".into(),
        }
    }
}

/// Result of one transition. Landing in [`EhState::Error`] means the caller
/// runs the cleanup and resets the session to [`EhState::Idle`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EhStep {
    pub next: EhState,
    pub actions: Vec<EhAction>,
}

/// The defined transitions; every other pair goes to the error state.
pub const EH_TRANSITIONS: [(EhState, EhEventKind, EhState); 8] = [
    (EhState::Idle, EhEventKind::DnsQuery, EhState::WaitDnsResp),
    (EhState::WaitDnsResp, EhEventKind::DnsIpResp, EhState::Idle),
    (EhState::Idle, EhEventKind::LocalSyn, EhState::WaitSynAck),
    (EhState::WaitSynAck, EhEventKind::SynAckReceived, EhState::TlsRelay),
    (EhState::WaitSynAck, EhEventKind::SynAckTimeout, EhState::Idle),
    (EhState::TlsRelay, EhEventKind::LocalTlsOut, EhState::TlsRelay),
    (EhState::TlsRelay, EhEventKind::LoraTlsIn, EhState::TlsRelay),
    (EhState::TlsRelay, EhEventKind::SessionEnd, EhState::Error),
];

pub fn eh_step(state: EhState, event: &EhEvent) -> EhStep {
    let defined = EH_TRANSITIONS.iter().find(|(s, e, _)| *s == state && *e == event.kind()).map(|&(_, _, next)| next);
    let Some(next) = defined else {
        return EhStep { next: EhState::Error, actions: vec![EhAction::Cleanup] };
    };
    let actions = match event {
        EhEvent::DnsQuery { qname } => {
            vec![EhAction::SendLora { kind: MessageKind::DnsQuery, data: qname.as_bytes().to_vec() }]
        }
        EhEvent::DnsIpResp { ip } => vec![EhAction::SpoofDnsResponse { ip: *ip }],
        EhEvent::LocalSyn { packet } => vec![EhAction::SendLora { kind: MessageKind::TcpSyn, data: packet.clone() }],
        EhEvent::SynAckReceived { packet } => vec![EhAction::SendFinalAck { syn_ack: packet.clone() }],
        EhEvent::SynAckTimeout => {
            vec![EhAction::SendFinAckToClient, EhAction::LogError { reason: "timed out waiting for SYN-ACK".into() }]
        }
        EhEvent::LocalTlsOut { data } => vec![EhAction::ChunkAndSend { data: data.clone() }],
        EhEvent::LoraTlsIn { data } => vec![EhAction::ReassembleAndForward { data: data.clone() }],
        EhEvent::SessionEnd { .. } => vec![EhAction::SendFinAckToClient, EhAction::Cleanup],
        EhEvent::LoraFragAck { .. } => unreachable!("no defined transition consumes chunk ACKs"),
    };
    EhStep { next, actions }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EhError {
    #[error("no session {0}")]
    SessionUnknown(u8),
    #[error("session {0} is not relaying TLS")]
    NotRelaying(u8),
    #[error("session {0}: client stream is not TLS record framing")]
    StreamCorrupt(u8),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

#[derive(Debug, Clone)]
pub struct EhConfig {
    pub retry: RetryPolicy,
    pub l_max: usize,
    pub sentinel: SentinelConfig,
    pub syn_ack_timeout: Duration,
    pub dns_ttl: u32,
    /// Largest TCP payload sent to a client in one segment.
    pub mss: usize,
}

impl Default for EhConfig {
    fn default() -> Self {
        EhConfig {
            retry: RetryPolicy::default(),
            l_max: L_MAX,
            sentinel: SentinelConfig::default(),
            syn_ack_timeout: Duration::from_secs(30),
            dns_ttl: DEFAULT_DNS_TTL,
            mss: 1460,
        }
    }
}

/// Per-session bookkeeping.
#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: u8,
    pub state: EhState,
    pub client_ip: Ipv4Addr,
    /// Client end of the TCP connection, once a SYN was seen.
    pub client: Option<SocketAddrV4>,
    pub target: Option<SocketAddrV4>,
    pub tsval_orig: Option<u32>,
    pub syn_ack_deadline: Option<SimTime>,
    pub created_at: SimTime,
    pub stage_timestamps: BTreeMap<&'static str, SimTime>,
    pub bytes_uplink: u64,
    pub bytes_downlink: u64,
    dns_query: Option<PacketView>,
    client_isn: u32,
    holds_slot: bool,
    client_next_seq: u32,
    server_next_seq: u32,
    awaiting_final_ack: bool,
    uplink: TlsRecordBuffer,
}

impl SessionRecord {
    fn new(session_id: u8, client_ip: Ipv4Addr, now: SimTime) -> Self {
        SessionRecord {
            session_id,
            state: EhState::Idle,
            client_ip,
            client: None,
            target: None,
            tsval_orig: None,
            syn_ack_deadline: None,
            created_at: now,
            stage_timestamps: BTreeMap::new(),
            bytes_uplink: 0,
            bytes_downlink: 0,
            dns_query: None,
            client_isn: 0,
            holds_slot: false,
            client_next_seq: 0,
            server_next_seq: 0,
            awaiting_final_ack: false,
            uplink: TlsRecordBuffer::new(),
        }
    }

    fn to_client(&self, flags: TcpFlags, payload: Vec<u8>) -> Result<Vec<u8>, PacketError> {
        let (Some(client), Some(target)) = (self.client, self.target) else {
            return Err(PacketError::Malformed("session has no TCP endpoints"));
        };
        let header = TcpHeader::new(self.server_next_seq, self.client_next_seq, flags);
        Ok(PacketView::new_tcp(target, client, header, payload)?.raw)
    }
}

/// One line of the transition log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionRecord {
    pub t: f64,
    pub node: &'static str,
    pub session: u8,
    pub state: &'static str,
    pub event: &'static str,
    pub next_state: &'static str,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    RejectedConcurrency,
    RejectedRate,
    DuplicateSyn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeOutcome {
    Started(u8),
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EhOutput {
    /// Raw IPv4 packet for the LAN.
    ToClient(Vec<u8>),
    /// Call [`EndHub::on_syn_ack_deadline`] at `at`.
    SynAckDeadline { session_id: u8, at: SimTime },
}

#[derive(Debug)]
pub struct EndHub {
    config: EhConfig,
    endpoint: Endpoint,
    sentinel: SentinelState,
    sessions: BTreeMap<u8, SessionRecord>,
    next_session_id: u8,
    log: Vec<TransitionRecord>,
    errors: Vec<(SimTime, u8, String)>,
}

impl EndHub {
    pub fn new(config: EhConfig, now: SimTime) -> Result<Self, SentinelError> {
        let sentinel = SentinelState::new(config.sentinel, now)?;
        let endpoint = Endpoint::new(config.retry, config.l_max);
        Ok(EndHub {
            config,
            endpoint,
            sentinel,
            sessions: BTreeMap::new(),
            next_session_id: 0,
            log: Vec::new(),
            errors: Vec::new(),
        })
    }

    pub fn config(&self) -> &EhConfig {
        &self.config
    }

    pub fn sentinel(&self) -> &SentinelState {
        &self.sentinel
    }

    pub fn session(&self, session_id: u8) -> Option<&SessionRecord> {
        self.sessions.get(&session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn log(&self) -> &[TransitionRecord] {
        &self.log
    }

    pub fn errors(&self) -> &[(SimTime, u8, String)] {
        &self.errors
    }

    pub fn endpoint_stats(&self) -> EndpointStats {
        self.endpoint.stats()
    }

    pub fn wants_transmit(&self) -> bool {
        self.endpoint.wants_transmit()
    }

    pub fn poll_transmit(&mut self) -> Option<Outgoing> {
        self.endpoint.poll_transmit()
    }

    pub fn ack_timeout(&self) -> Duration {
        self.endpoint.policy().ack_timeout
    }

    /// A packet sniffed on the LAN.
    pub fn on_lan_packet(&mut self, bytes: &[u8], now: SimTime) -> Vec<EhOutput> {
        let Ok(packet) = parse_packet(bytes) else { return Vec::new() };
        match packet.transport {
            Transport::Udp if packet.dst_port == DNS_PORT => match extract_dns_query(&packet) {
                Ok(query) => self.on_dns_query(packet, query.qname, now),
                Err(_) => Vec::new(),
            },
            Transport::Udp => Vec::new(),
            Transport::Tcp(ref header) => {
                if header.flags.contains(TcpFlags::SYN) && !header.flags.contains(TcpFlags::ACK) {
                    self.handle_client_syn(&packet, now).1
                } else {
                    self.on_client_segment(&packet, now)
                }
            }
        }
    }

    /// A frame heard on the radio.
    pub fn on_lora_frame(&mut self, bytes: &[u8], now: SimTime) -> Vec<EhOutput> {
        let events = self.endpoint.on_frame(bytes, now);
        self.on_endpoint_events(events, now)
    }

    pub fn on_ack_timer(&mut self, token: u64, now: SimTime) -> Vec<EhOutput> {
        let events = self.endpoint.on_timer(token);
        self.on_endpoint_events(events, now)
    }

    pub fn on_syn_ack_deadline(&mut self, session_id: u8, now: SimTime) -> Vec<EhOutput> {
        let due = self
            .sessions
            .get(&session_id)
            .is_some_and(|rec| rec.state == EhState::WaitSynAck && rec.syn_ack_deadline.is_some_and(|d| d <= now));
        if !due {
            return Vec::new();
        }
        self.apply(session_id, EhEvent::SynAckTimeout, now)
    }

    pub fn tick(&mut self, now: SimTime) -> Vec<EhOutput> {
        let sessions = &self.sessions;
        let events = self.endpoint.tick(now, |s| sessions.contains_key(&s));
        self.on_endpoint_events(events, now)
    }

    /// Admission and session start for a client SYN.
    pub fn handle_client_syn(&mut self, syn: &PacketView, now: SimTime) -> (HandshakeOutcome, Vec<EhOutput>) {
        let Some(header) = syn.tcp() else {
            return (HandshakeOutcome::Dropped(DropReason::DuplicateSyn), Vec::new());
        };
        let duplicate = self.sessions.values().any(|rec| {
            rec.state == EhState::WaitSynAck
                && rec.client == Some(syn.src())
                && rec.target == Some(syn.dst())
                && rec.client_isn == header.seq
        });
        if duplicate {
            return (HandshakeOutcome::Dropped(DropReason::DuplicateSyn), Vec::new());
        }
        match self.sentinel.admit(now) {
            Decision::Admitted => {}
            Decision::RejectedConcurrency => {
                return (HandshakeOutcome::Dropped(DropReason::RejectedConcurrency), Vec::new())
            }
            Decision::RejectedRate => return (HandshakeOutcome::Dropped(DropReason::RejectedRate), Vec::new()),
        }
        let reuse = self
            .sessions
            .values()
            .find(|rec| rec.state == EhState::Idle && rec.client_ip == syn.src_ip && rec.client.is_none())
            .map(|rec| rec.session_id);
        let session_id = match reuse {
            Some(id) => id,
            None => self.open_session(syn.src_ip, now),
        };
        let deadline = now + self.config.syn_ack_timeout;
        {
            let rec = self.sessions.get_mut(&session_id).expect("session just opened");
            rec.client = Some(syn.src());
            rec.target = Some(syn.dst());
            rec.tsval_orig = header.timestamp().map(|(tsval, _)| tsval);
            rec.client_isn = header.seq;
            rec.client_next_seq = header.seq.wrapping_add(1);
            rec.holds_slot = true;
            rec.stage_timestamps.insert("syn", now);
        }
        let mut out = self.apply(session_id, EhEvent::LocalSyn { packet: syn.raw.clone() }, now);
        if let Some(rec) = self.sessions.get_mut(&session_id) {
            if rec.state == EhState::WaitSynAck {
                rec.syn_ack_deadline = Some(deadline);
                out.push(EhOutput::SynAckDeadline { session_id, at: deadline });
            }
        }
        (HandshakeOutcome::Started(session_id), out)
    }

    /// Cuts client TLS bytes on record boundaries and queues one `TLS_DATA`
    /// message per complete record.
    pub fn relay_uplink(&mut self, session_id: u8, bytes: &[u8]) -> Result<Vec<PayloadMessage>, EhError> {
        let rec = self.sessions.get_mut(&session_id).ok_or(EhError::SessionUnknown(session_id))?;
        if rec.state != EhState::TlsRelay {
            return Err(EhError::NotRelaying(session_id));
        }
        let records = rec.uplink.push(bytes).map_err(|_| EhError::StreamCorrupt(session_id))?;
        let mut sent = Vec::with_capacity(records.len());
        for record in records {
            rec.bytes_uplink += record.len() as u64;
            let payload_id = self.endpoint.send(MessageKind::TlsData, session_id, record.clone())?;
            sent.push(PayloadMessage { payload_id, kind: MessageKind::TlsData, session_id, data: record });
        }
        Ok(sent)
    }

    /// Wraps relayed TLS bytes into TCP segments toward the client.
    pub fn relay_downlink(&mut self, message: &PayloadMessage) -> Result<Vec<Vec<u8>>, EhError> {
        let session_id = message.session_id;
        let rec = self.sessions.get_mut(&session_id).ok_or(EhError::SessionUnknown(session_id))?;
        if rec.state != EhState::TlsRelay || message.kind != MessageKind::TlsData {
            return Err(EhError::NotRelaying(session_id));
        }
        let mut packets = Vec::new();
        for piece in message.data.chunks(self.config.mss.max(1)) {
            packets.push(rec.to_client(TcpFlags::PSH | TcpFlags::ACK, piece.to_vec())?);
            rec.server_next_seq = rec.server_next_seq.wrapping_add(piece.len() as u32);
        }
        rec.bytes_downlink += message.data.len() as u64;
        Ok(packets)
    }

    fn open_session(&mut self, client_ip: Ipv4Addr, now: SimTime) -> u8 {
        let mut id = self.next_session_id;
        while self.sessions.contains_key(&id) {
            id = id.wrapping_add(1);
        }
        self.next_session_id = id.wrapping_add(1);
        self.endpoint.forget_session(id);
        self.sessions.insert(id, SessionRecord::new(id, client_ip, now));
        id
    }

    fn on_dns_query(&mut self, packet: PacketView, qname: String, now: SimTime) -> Vec<EhOutput> {
        let mut out = Vec::new();
        let stale: Vec<u8> = self
            .sessions
            .values()
            .filter(|rec| rec.client_ip == packet.src_ip && rec.client.is_none())
            .map(|rec| rec.session_id)
            .collect();
        for id in stale {
            out.extend(self.teardown(id, EndReason::Superseded, now));
        }
        let session_id = self.open_session(packet.src_ip, now);
        let rec = self.sessions.get_mut(&session_id).expect("session just opened");
        rec.dns_query = Some(packet);
        rec.stage_timestamps.insert("dns_query", now);
        out.extend(self.apply(session_id, EhEvent::DnsQuery { qname }, now));
        out
    }

    fn on_client_segment(&mut self, packet: &PacketView, now: SimTime) -> Vec<EhOutput> {
        let Some(header) = packet.tcp() else { return Vec::new() };
        let found = self
            .sessions
            .values()
            .find(|rec| rec.client == Some(packet.src()) && rec.target == Some(packet.dst()))
            .map(|rec| (rec.session_id, rec.state));
        let Some((session_id, state)) = found else { return Vec::new() };
        if header.flags.contains(TcpFlags::RST) {
            return self.apply(session_id, EhEvent::SessionEnd { reason: EndReason::ClientReset }, now);
        }
        if state != EhState::TlsRelay {
            return Vec::new();
        }
        let mut out = Vec::new();
        let rec = self.sessions.get_mut(&session_id).expect("session found");
        if rec.awaiting_final_ack && header.flags.contains(TcpFlags::ACK) {
            rec.awaiting_final_ack = false;
            rec.stage_timestamps.insert("final_ack", now);
            let ack = if packet.payload.is_empty() && !header.flags.contains(TcpFlags::FIN) {
                packet.raw.clone()
            } else {
                let mut bare = packet.clone();
                bare.payload.clear();
                if let Transport::Tcp(ref mut h) = bare.transport {
                    h.flags = TcpFlags::ACK;
                }
                match bare.rebuilt() {
                    Ok(p) => p.raw,
                    Err(_) => return out,
                }
            };
            if let Err(e) = self.endpoint.send(MessageKind::TcpAck, session_id, ack) {
                self.errors.push((now, session_id, e.to_string()));
            }
        }

        let rec = self.sessions.get_mut(&session_id).expect("session found");
        let len = packet.payload.len() as u32;
        if len > 0 {
            let offset = header.seq.wrapping_sub(rec.client_next_seq);
            if offset == 0 {
                rec.client_next_seq = rec.client_next_seq.wrapping_add(len);
                if let Ok(ack) = rec.to_client(TcpFlags::ACK, Vec::new()) {
                    out.push(EhOutput::ToClient(ack));
                }
                out.extend(self.apply(session_id, EhEvent::LocalTlsOut { data: packet.payload.clone() }, now));
            } else if offset >= 0x8000_0000 {
                // retransmission of bytes already relayed
                if let Ok(ack) = rec.to_client(TcpFlags::ACK, Vec::new()) {
                    out.push(EhOutput::ToClient(ack));
                }
            }
        }
        if header.flags.contains(TcpFlags::FIN) {
            if let Some(rec) = self.sessions.get_mut(&session_id) {
                rec.client_next_seq = rec.client_next_seq.wrapping_add(1);
            }
            out.extend(self.apply(session_id, EhEvent::SessionEnd { reason: EndReason::ClientFin }, now));
        }
        out
    }

    fn on_endpoint_events(&mut self, events: Vec<EndpointEvent>, now: SimTime) -> Vec<EhOutput> {
        let mut out = Vec::new();
        for event in events {
            match event {
                EndpointEvent::Delivered(message) => out.extend(self.on_message(message, now)),
                EndpointEvent::SendFailed { session_id, .. } => {
                    if self.sessions.contains_key(&session_id) {
                        out.extend(self.apply(session_id, EhEvent::SessionEnd { reason: EndReason::SendFailed }, now));
                    }
                }
                EndpointEvent::Sent { .. } => {}
            }
        }
        out
    }

    fn on_message(&mut self, message: PayloadMessage, now: SimTime) -> Vec<EhOutput> {
        let session_id = message.session_id;
        if !self.sessions.contains_key(&session_id) {
            self.errors.push((now, session_id, EhError::SessionUnknown(session_id).to_string()));
            return Vec::new();
        }
        let event = match message.kind {
            MessageKind::DnsResp => match <[u8; 4]>::try_from(message.data.as_slice()) {
                Ok(octets) => EhEvent::DnsIpResp { ip: Ipv4Addr::from(octets) },
                Err(_) => EhEvent::SessionEnd { reason: EndReason::PeerError },
            },
            MessageKind::TcpSynack => EhEvent::SynAckReceived { packet: message.data },
            MessageKind::TlsData => EhEvent::LoraTlsIn { data: message.data },
            MessageKind::Fin => EhEvent::SessionEnd { reason: EndReason::PeerFin },
            MessageKind::Error => EhEvent::SessionEnd { reason: EndReason::PeerError },
            other => {
                self.errors.push((now, session_id, format!("unexpected {other} message from relay")));
                return Vec::new();
            }
        };
        self.apply(session_id, event, now)
    }

    /// Runs one transition for a session and carries out its actions.
    fn apply(&mut self, session_id: u8, event: EhEvent, now: SimTime) -> Vec<EhOutput> {
        let Some(state) = self.sessions.get(&session_id).map(|rec| rec.state) else { return Vec::new() };
        let step = eh_step(state, &event);
        self.log.push(TransitionRecord {
            t: now.as_secs_f64(),
            node: "EH",
            session: session_id,
            state: state.label(),
            event: event.kind().label(),
            next_state: step.next.label(),
            actions: step.actions.iter().map(EhAction::label).collect(),
        });
        if let Some(rec) = self.sessions.get_mut(&session_id) {
            rec.state = step.next;
            if step.next != EhState::WaitSynAck {
                rec.syn_ack_deadline = None;
            }
        }
        let reason = match event {
            EhEvent::SessionEnd { reason } => reason,
            _ => EndReason::ClientReset,
        };

        let mut out = Vec::new();
        let mut corrupt = false;
        for action in step.actions {
            match self.execute(session_id, action, reason, now, &mut out) {
                Ok(()) => {}
                Err(EhError::StreamCorrupt(_)) => corrupt = true,
                Err(e) => self.errors.push((now, session_id, e.to_string())),
            }
        }

        if step.next == EhState::Error {
            self.log.push(TransitionRecord {
                t: now.as_secs_f64(),
                node: "EH",
                session: session_id,
                state: EhState::Error.label(),
                event: "RESET",
                next_state: EhState::Idle.label(),
                actions: Vec::new(),
            });
            if let Some(rec) = self.sessions.get_mut(&session_id) {
                rec.state = EhState::Idle;
            }
        } else if event.kind() == EhEventKind::SynAckTimeout {
            out.extend(self.teardown(session_id, EndReason::SendFailed, now));
        }
        if corrupt {
            out.extend(self.apply(session_id, EhEvent::SessionEnd { reason: EndReason::StreamCorrupt }, now));
        }
        out
    }

    fn execute(
        &mut self,
        session_id: u8,
        action: EhAction,
        reason: EndReason,
        now: SimTime,
        out: &mut Vec<EhOutput>,
    ) -> Result<(), EhError> {
        match action {
            EhAction::SendLora { kind, data } => {
                self.endpoint.send(kind, session_id, data)?;
            }
            EhAction::SpoofDnsResponse { ip } => {
                let rec = self.sessions.get(&session_id).ok_or(EhError::SessionUnknown(session_id))?;
                if let Some(query) = &rec.dns_query {
                    out.push(EhOutput::ToClient(build_dns_response(query, ip, self.config.dns_ttl)?.raw));
                }
            }
            EhAction::SendFinalAck { syn_ack } => {
                let packet = parse_packet(&syn_ack)?;
                let rec = self.sessions.get_mut(&session_id).ok_or(EhError::SessionUnknown(session_id))?;
                if let Some(h) = packet.tcp() {
                    rec.server_next_seq = h.seq.wrapping_add(1);
                }
                rec.awaiting_final_ack = true;
                rec.stage_timestamps.insert("syn_ack", now);
                out.push(EhOutput::ToClient(syn_ack));
            }
            EhAction::SendFinAckToClient => {
                let rec = self.sessions.get_mut(&session_id).ok_or(EhError::SessionUnknown(session_id))?;
                if rec.client.is_some() {
                    out.push(EhOutput::ToClient(rec.to_client(TcpFlags::FIN | TcpFlags::ACK, Vec::new())?));
                    rec.server_next_seq = rec.server_next_seq.wrapping_add(1);
                }
            }
            EhAction::LogError { reason } => self.errors.push((now, session_id, reason)),
            EhAction::ChunkAndSend { data } => {
                self.relay_uplink(session_id, &data)?;
            }
            EhAction::ReassembleAndForward { data } => {
                let message = PayloadMessage { payload_id: 0, kind: MessageKind::TlsData, session_id, data };
                out.extend(self.relay_downlink(&message)?.into_iter().map(EhOutput::ToClient));
            }
            EhAction::Cleanup => out.extend(self.teardown(session_id, reason, now)),
        }
        Ok(())
    }

    /// Ends a session: frees its admission slot, tells the relay unless the
    /// relay ended it, and forgets it.
    fn teardown(&mut self, session_id: u8, reason: EndReason, now: SimTime) -> Vec<EhOutput> {
        let Some(rec) = self.sessions.remove(&session_id) else { return Vec::new() };
        if rec.holds_slot {
            if let Err(e) = self.sentinel.release() {
                self.errors.push((now, session_id, e.to_string()));
            }
        }
        if !reason.peer_initiated() {
            if let Err(e) = self.endpoint.send(MessageKind::Fin, session_id, vec![0]) {
                self.errors.push((now, session_id, e.to_string()));
            }
        }
        self.endpoint.forget_session(session_id);
        Vec::new()
    }
}
