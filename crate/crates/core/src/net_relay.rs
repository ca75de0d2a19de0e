//! Server-side proxy.
//!
//! [`nr_step`] is the pure transition table. [`NetRelay`] is the sans-IO
//! runtime: it resolves names, replays the client's handshake toward the
//! server under its own address with timestamp correction, and relays TLS
//! bytes between the radio [`Endpoint`] and the server connection.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::end_hub::TransitionRecord;
use crate::endpoint::{Endpoint, EndpointEvent, EndpointStats, Outgoing};
use crate::frame_codec::{FrameError, MessageKind, PayloadMessage, RetryPolicy, L_MAX};
use crate::packet_engine::{
    correct_syn_ack_timestamp, nat_rewrite, parse_packet, rewrite_timestamp, NatDirection, NatMapping, PacketError,
    PacketView, TcpFlags, TcpHeader, TlsRecordBuffer,
};
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum NrState {
    IdleWaitDns,
    WaitSyn,
    WaitAck,
    TlsRelay,
    Error,
}

impl NrState {
    pub const ALL: [NrState; 5] =
        [NrState::IdleWaitDns, NrState::WaitSyn, NrState::WaitAck, NrState::TlsRelay, NrState::Error];

    pub fn label(self) -> &'static str {
        match self {
            NrState::IdleWaitDns => "S0_IDLE_WAIT_DNS",
            NrState::WaitSyn => "S1_WAIT_SYN",
            NrState::WaitAck => "S2_WAIT_ACK",
            NrState::TlsRelay => "S3_TLS_RELAY",
            NrState::Error => "S4_ERROR",
        }
    }
}

impl fmt::Display for NrState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NrEventKind {
    LoraDnsQuery,
    DnsFail,
    LoraSyn,
    UpstreamSynAck,
    SynAckFail,
    LoraFinalAck,
    LoraTlsFrag,
    SessionEnd,
}

impl NrEventKind {
    pub const ALL: [NrEventKind; 8] = [
        NrEventKind::LoraDnsQuery,
        NrEventKind::DnsFail,
        NrEventKind::LoraSyn,
        NrEventKind::UpstreamSynAck,
        NrEventKind::SynAckFail,
        NrEventKind::LoraFinalAck,
        NrEventKind::LoraTlsFrag,
        NrEventKind::SessionEnd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NrEventKind::LoraDnsQuery => "E0_LORA_DNS_QUERY",
            NrEventKind::DnsFail => "E1_DNS_FAIL",
            NrEventKind::LoraSyn => "E2_LORA_SYN",
            NrEventKind::UpstreamSynAck => "E3_UPSTREAM_SYNACK",
            NrEventKind::SynAckFail => "E4_SYNACK_FAIL",
            NrEventKind::LoraFinalAck => "E5_LORA_FINAL_ACK",
            NrEventKind::LoraTlsFrag => "E6_LORA_TLS_FRAG",
            NrEventKind::SessionEnd => "E7_SESSION_END",
        }
    }
}

/// Why a relay session is ending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NrEndReason {
    /// The hub closed or abandoned the session.
    PeerEnded,
    UpstreamClosed,
    UpstreamReset,
    SendFailed,
    StreamCorrupt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NrEvent {
    /// Name already resolved to `ip`.
    LoraDnsQuery {
        qname: String,
        ip: Ipv4Addr,
    },
    DnsFail {
        qname: String,
    },
    LoraSyn {
        packet: Vec<u8>,
    },
    UpstreamSynAck {
        packet: Vec<u8>,
    },
    SynAckFail,
    LoraFinalAck {
        packet: Vec<u8>,
    },
    LoraTlsFrag {
        data: Vec<u8>,
    },
    SessionEnd {
        reason: NrEndReason,
    },
}

impl NrEvent {
    pub fn kind(&self) -> NrEventKind {
        match self {
            NrEvent::LoraDnsQuery { .. } => NrEventKind::LoraDnsQuery,
            NrEvent::DnsFail { .. } => NrEventKind::DnsFail,
            NrEvent::LoraSyn { .. } => NrEventKind::LoraSyn,
            NrEvent::UpstreamSynAck { .. } => NrEventKind::UpstreamSynAck,
            NrEvent::SynAckFail => NrEventKind::SynAckFail,
            NrEvent::LoraFinalAck { .. } => NrEventKind::LoraFinalAck,
            NrEvent::LoraTlsFrag { .. } => NrEventKind::LoraTlsFrag,
            NrEvent::SessionEnd { .. } => NrEventKind::SessionEnd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NrAction {
    /// Record the resolution of `qname`.
    Resolve {
        qname: String,
        ip: Ipv4Addr,
    },
    SendLora {
        kind: MessageKind,
        data: Vec<u8>,
    },
    ModifyAndSendSyn {
        packet: Vec<u8>,
    },
    CorrectTimestampAndSendSynAck {
        packet: Vec<u8>,
    },
    ReportError {
        reason: String,
    },
    ForwardAck {
        packet: Vec<u8>,
    },
    ReassembleAndForward {
        data: Vec<u8>,
    },
    Cleanup,
}

impl NrAction {
    pub fn label(&self) -> String {
        match self {
            NrAction::Resolve { qname, ip } => format!("Resolve({qname}={ip})"),
            NrAction::SendLora { kind, .. } => format!("SendLora({kind})"),
            NrAction::ModifyAndSendSyn { .. } => "ModifyAndSendSyn".into(),
            NrAction::CorrectTimestampAndSendSynAck { .. } => "CorrectTimestampAndSendSynAck".into(),
            NrAction::ReportError { reason } => format!("ReportError({reason})"),
            NrAction::ForwardAck { .. } => "ForwardAck".into(),
            NrAction::ReassembleAndForward { data } => format!("ReassembleAndForward({}B)", data.len()),
            NrAction::Cleanup => "Cleanup".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NrStep {
    pub next: NrState,
    pub actions: Vec<NrAction>,
}

/// Defined transitions for a specific state. Session end is accepted in
/// every state and handled separately.
pub const NR_TRANSITIONS: [(NrState, NrEventKind, NrState); 7] = [
    (NrState::IdleWaitDns, NrEventKind::LoraDnsQuery, NrState::WaitSyn),
    (NrState::IdleWaitDns, NrEventKind::DnsFail, NrState::Error),
    (NrState::WaitSyn, NrEventKind::LoraSyn, NrState::WaitAck),
    (NrState::WaitAck, NrEventKind::UpstreamSynAck, NrState::TlsRelay),
    (NrState::WaitAck, NrEventKind::SynAckFail, NrState::IdleWaitDns),
    (NrState::TlsRelay, NrEventKind::LoraFinalAck, NrState::TlsRelay),
    (NrState::TlsRelay, NrEventKind::LoraTlsFrag, NrState::TlsRelay),
];

pub fn nr_step(state: NrState, event: &NrEvent) -> NrStep {
    if let NrEvent::SessionEnd { reason } = event {
        return NrStep {
            next: NrState::IdleWaitDns,
            actions: vec![NrAction::ReportError { reason: format!("{reason:?}") }, NrAction::Cleanup],
        };
    }
    let defined = NR_TRANSITIONS.iter().find(|(s, e, _)| *s == state && *e == event.kind()).map(|&(_, _, next)| next);
    let Some(next) = defined else {
        return NrStep { next: NrState::Error, actions: vec![NrAction::Cleanup] };
    };
    let actions = match event {
        NrEvent::LoraDnsQuery { qname, ip } => vec![
            NrAction::Resolve { qname: qname.clone(), ip: *ip },
            NrAction::SendLora { kind: MessageKind::DnsResp, data: ip.octets().to_vec() },
        ],
        NrEvent::DnsFail { qname } => {
            vec![NrAction::ReportError { reason: format!("cannot resolve {qname}") }, NrAction::Cleanup]
        }
        NrEvent::LoraSyn { packet } => vec![NrAction::ModifyAndSendSyn { packet: packet.clone() }],
        NrEvent::UpstreamSynAck { packet } => {
            vec![NrAction::CorrectTimestampAndSendSynAck { packet: packet.clone() }]
        }
        NrEvent::SynAckFail => vec![NrAction::ReportError { reason: "no SYN-ACK from server".into() }],
        NrEvent::LoraFinalAck { packet } => vec![NrAction::ForwardAck { packet: packet.clone() }],
        NrEvent::LoraTlsFrag { data } => vec![NrAction::ReassembleAndForward { data: data.clone() }],
        NrEvent::SessionEnd { .. } => unreachable!("handled above"),
    };
    NrStep { next, actions }
}

/// Name resolution used for `DNS_QUERY` messages.
pub trait Resolver {
    fn resolve(&mut self, qname: &str) -> Option<Ipv4Addr>;
}

/// Fixed name table.
#[derive(Debug, Clone, Default)]
pub struct StaticResolver {
    pub names: HashMap<String, Ipv4Addr>,
}

impl Resolver for StaticResolver {
    fn resolve(&mut self, qname: &str) -> Option<Ipv4Addr> {
        self.names.get(&qname.to_ascii_lowercase()).copied()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NrError {
    #[error("no session {0}")]
    SessionUnknown(u8),
    #[error("session {0} is not relaying TLS")]
    NotRelaying(u8),
    #[error("session {0}: upstream stream is not TLS record framing")]
    StreamCorrupt(u8),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

#[derive(Debug, Clone)]
pub struct NrConfig {
    pub retry: RetryPolicy,
    pub l_max: usize,
    pub relay_ip: Ipv4Addr,
    pub first_relay_port: u16,
    pub syn_ack_timeout: Duration,
    /// Overwrite TSecr on the SYN-ACK with the client's TSval. Turning this
    /// off reproduces the failure the correction exists to prevent.
    pub correct_timestamps: bool,
    pub mss: usize,
}

impl Default for NrConfig {
    fn default() -> Self {
        NrConfig {
            retry: RetryPolicy::default(),
            l_max: L_MAX,
            relay_ip: Ipv4Addr::new(198, 51, 100, 1),
            first_relay_port: 41000,
            syn_ack_timeout: Duration::from_secs(10),
            correct_timestamps: true,
            mss: 1460,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NrSession {
    pub session_id: u8,
    pub state: NrState,
    pub qname: Option<String>,
    pub resolved: Option<Ipv4Addr>,
    pub mapping: Option<NatMapping>,
    pub server: Option<SocketAddrV4>,
    pub tsval_orig: Option<u32>,
    pub syn_ack_deadline: Option<SimTime>,
    /// SYN-ACK relayed, client's final ACK not yet seen.
    pub awaiting_final_ack: bool,
    pub bytes_upstream: u64,
    pub bytes_downstream: u64,
    /// Next sequence number toward the server.
    relay_next_seq: u32,
    /// Next sequence number expected from the server.
    server_next_seq: u32,
    upstream_open: bool,
    downlink: TlsRecordBuffer,
}

impl NrSession {
    fn new(session_id: u8) -> Self {
        NrSession {
            session_id,
            state: NrState::IdleWaitDns,
            qname: None,
            resolved: None,
            mapping: None,
            server: None,
            tsval_orig: None,
            syn_ack_deadline: None,
            awaiting_final_ack: false,
            bytes_upstream: 0,
            bytes_downstream: 0,
            relay_next_seq: 0,
            server_next_seq: 0,
            upstream_open: false,
            downlink: TlsRecordBuffer::new(),
        }
    }

    fn to_server(&self, flags: TcpFlags, payload: Vec<u8>) -> Result<Vec<u8>, PacketError> {
        let (Some(mapping), Some(server)) = (self.mapping, self.server) else {
            return Err(PacketError::Malformed("session has no upstream connection"));
        };
        let header = TcpHeader::new(self.relay_next_seq, self.server_next_seq, flags);
        Ok(PacketView::new_tcp(mapping.relay(), server, header, payload)?.raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionResult {
    /// SYN is on its way to the server; the SYN-ACK completes the step.
    Pending,
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NrOutput {
    /// Raw IPv4 packet for the server side.
    ToUpstream(Vec<u8>),
    /// Call [`NetRelay::on_syn_ack_deadline`] at `at`.
    SynAckDeadline { session_id: u8, at: SimTime },
}

#[derive(Debug)]
pub struct NetRelay {
    config: NrConfig,
    endpoint: Endpoint,
    sessions: BTreeMap<u8, NrSession>,
    next_port: u16,
    log: Vec<TransitionRecord>,
    errors: Vec<(SimTime, u8, String)>,
}

impl NetRelay {
    pub fn new(config: NrConfig) -> Self {
        let endpoint = Endpoint::new(config.retry, config.l_max);
        let next_port = config.first_relay_port;
        NetRelay { config, endpoint, sessions: BTreeMap::new(), next_port, log: Vec::new(), errors: Vec::new() }
    }

    pub fn config(&self) -> &NrConfig {
        &self.config
    }

    pub fn session(&self, session_id: u8) -> Option<&NrSession> {
        self.sessions.get(&session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &NrSession> {
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

    /// Looks up `qname`; a miss is the resolution failure event.
    pub fn resolve_domain(&mut self, qname: &str, resolver: &mut impl Resolver) -> Option<Ipv4Addr> {
        if qname.is_empty() {
            return None;
        }
        resolver.resolve(qname)
    }

    pub fn on_lora_frame(&mut self, bytes: &[u8], now: SimTime, resolver: &mut impl Resolver) -> Vec<NrOutput> {
        let events = self.endpoint.on_frame(bytes, now);
        self.on_endpoint_events(events, now, resolver)
    }

    pub fn on_ack_timer(&mut self, token: u64, now: SimTime, resolver: &mut impl Resolver) -> Vec<NrOutput> {
        let events = self.endpoint.on_timer(token);
        self.on_endpoint_events(events, now, resolver)
    }

    pub fn tick(&mut self, now: SimTime, resolver: &mut impl Resolver) -> Vec<NrOutput> {
        let sessions = &self.sessions;
        let events = self.endpoint.tick(now, |s| sessions.contains_key(&s));
        self.on_endpoint_events(events, now, resolver)
    }

    pub fn on_syn_ack_deadline(&mut self, session_id: u8, now: SimTime) -> Vec<NrOutput> {
        let due = self.sessions.get(&session_id).is_some_and(|s| {
            s.state == NrState::WaitAck && !s.awaiting_final_ack && s.syn_ack_deadline.is_some_and(|d| d <= now)
        });
        if !due {
            return Vec::new();
        }
        self.apply(session_id, NrEvent::SynAckFail, now)
    }

    /// A packet from the server side.
    pub fn on_upstream_packet(&mut self, bytes: &[u8], now: SimTime) -> Vec<NrOutput> {
        let Ok(packet) = parse_packet(bytes) else { return Vec::new() };
        let Some(header) = packet.tcp().cloned() else { return Vec::new() };
        let found = self
            .sessions
            .values()
            .find(|s| {
                s.upstream_open && s.server == Some(packet.src()) && s.mapping.map(|m| m.relay()) == Some(packet.dst())
            })
            .map(|s| (s.session_id, s.state, s.awaiting_final_ack));
        let Some((session_id, state, awaiting)) = found else { return Vec::new() };

        if header.flags.contains(TcpFlags::RST) {
            return self.apply(session_id, NrEvent::SessionEnd { reason: NrEndReason::UpstreamReset }, now);
        }
        if header.flags.contains(TcpFlags::SYN | TcpFlags::ACK) {
            if state == NrState::WaitAck && !awaiting {
                return self.apply(session_id, NrEvent::UpstreamSynAck { packet: packet.raw }, now);
            }
            return Vec::new();
        }

        let mut out = Vec::new();
        if !packet.payload.is_empty() && state == NrState::TlsRelay {
            match self.relay_downstream(session_id, &packet) {
                Ok(ack) => out.extend(ack.map(NrOutput::ToUpstream)),
                Err(NrError::StreamCorrupt(_)) => {
                    out.extend(self.apply(session_id, NrEvent::SessionEnd { reason: NrEndReason::StreamCorrupt }, now));
                    return out;
                }
                Err(e) => self.errors.push((now, session_id, e.to_string())),
            }
        }
        if header.flags.contains(TcpFlags::FIN) {
            if let Some(s) = self.sessions.get_mut(&session_id) {
                s.server_next_seq = s.server_next_seq.wrapping_add(1);
            }
            out.extend(self.apply(session_id, NrEvent::SessionEnd { reason: NrEndReason::UpstreamClosed }, now));
        }
        out
    }

    /// Handshake replay for `TCP_SYN` and `TCP_ACK` messages.
    pub fn handle_handshake_message(
        &mut self,
        message: &PayloadMessage,
        now: SimTime,
    ) -> (ReconstructionResult, Vec<NrOutput>) {
        let session_id = message.session_id;
        let state = self.sessions.get(&session_id).map(|s| (s.state, s.awaiting_final_ack));
        match (message.kind, state) {
            (MessageKind::TcpSyn, Some((NrState::WaitSyn, _))) => {
                let out = self.apply(session_id, NrEvent::LoraSyn { packet: message.data.clone() }, now);
                let ok = self.sessions.get(&session_id).is_some_and(|s| s.state == NrState::WaitAck);
                (if ok { ReconstructionResult::Pending } else { ReconstructionResult::Failure }, out)
            }
            (MessageKind::TcpAck, Some((NrState::WaitAck, true))) => {
                // the handshake is complete only once the client's ACK is through
                let mut out = Vec::new();
                self.log.push(self.record(
                    now,
                    session_id,
                    NrState::WaitAck,
                    NrEventKind::LoraFinalAck,
                    NrState::TlsRelay,
                    vec!["ForwardAck".into()],
                ));
                match self.forward_ack(session_id, &message.data) {
                    Ok(packet) => out.push(NrOutput::ToUpstream(packet)),
                    Err(e) => {
                        self.errors.push((now, session_id, e.to_string()));
                        return (ReconstructionResult::Failure, out);
                    }
                }
                let s = self.sessions.get_mut(&session_id).expect("session checked");
                s.awaiting_final_ack = false;
                s.state = NrState::TlsRelay;
                (ReconstructionResult::Success, out)
            }
            (MessageKind::TcpAck, Some(_)) => {
                let out = self.apply(session_id, NrEvent::LoraFinalAck { packet: message.data.clone() }, now);
                let ok = self.sessions.get(&session_id).is_some_and(|s| s.state == NrState::TlsRelay);
                (if ok { ReconstructionResult::Success } else { ReconstructionResult::Failure }, out)
            }
            (MessageKind::TcpSyn, Some(_)) => {
                let out = self.apply(session_id, NrEvent::LoraSyn { packet: message.data.clone() }, now);
                (ReconstructionResult::Failure, out)
            }
            _ => (ReconstructionResult::Failure, Vec::new()),
        }
    }

    /// Writes relayed TLS bytes to the server as TCP segments.
    pub fn relay_upstream(&mut self, session_id: u8, data: &[u8]) -> Result<Vec<Vec<u8>>, NrError> {
        let mss = self.config.mss.max(1);
        let s = self.sessions.get_mut(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
        if s.state != NrState::TlsRelay {
            return Err(NrError::NotRelaying(session_id));
        }
        let mut packets = Vec::new();
        for piece in data.chunks(mss) {
            packets.push(s.to_server(TcpFlags::PSH | TcpFlags::ACK, piece.to_vec())?);
            s.relay_next_seq = s.relay_next_seq.wrapping_add(piece.len() as u32);
        }
        s.bytes_upstream += data.len() as u64;
        Ok(packets)
    }

    /// Takes a server data segment, queues complete TLS records toward the
    /// hub and returns the ACK for the server if one is due.
    pub fn relay_downstream(&mut self, session_id: u8, packet: &PacketView) -> Result<Option<Vec<u8>>, NrError> {
        let s = self.sessions.get_mut(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
        if s.state != NrState::TlsRelay {
            return Err(NrError::NotRelaying(session_id));
        }
        let Some(header) = packet.tcp() else { return Ok(None) };
        let offset = header.seq.wrapping_sub(s.server_next_seq);
        if offset != 0 {
            // duplicate or out-of-order; re-ACK what we have
            return Ok(Some(s.to_server(TcpFlags::ACK, Vec::new())?));
        }
        s.server_next_seq = s.server_next_seq.wrapping_add(packet.payload.len() as u32);
        let records = s.downlink.push(&packet.payload).map_err(|_| NrError::StreamCorrupt(session_id))?;
        let ack = s.to_server(TcpFlags::ACK, Vec::new())?;
        for record in records {
            s.bytes_downstream += record.len() as u64;
            self.endpoint.send(MessageKind::TlsData, session_id, record)?;
        }
        Ok(Some(ack))
    }

    fn on_endpoint_events(
        &mut self,
        events: Vec<EndpointEvent>,
        now: SimTime,
        resolver: &mut impl Resolver,
    ) -> Vec<NrOutput> {
        let mut out = Vec::new();
        for event in events {
            match event {
                EndpointEvent::Delivered(message) => out.extend(self.on_message(message, now, resolver)),
                EndpointEvent::SendFailed { session_id, .. } => {
                    if self.sessions.contains_key(&session_id) {
                        out.extend(self.apply(
                            session_id,
                            NrEvent::SessionEnd { reason: NrEndReason::SendFailed },
                            now,
                        ));
                    }
                }
                EndpointEvent::Sent { .. } => {}
            }
        }
        out
    }

    fn on_message(&mut self, message: PayloadMessage, now: SimTime, resolver: &mut impl Resolver) -> Vec<NrOutput> {
        let session_id = message.session_id;
        if message.kind == MessageKind::DnsQuery {
            let mut out = Vec::new();
            if self.sessions.get(&session_id).is_some_and(|s| s.state != NrState::IdleWaitDns) {
                // a new query on a live id means the hub restarted the session
                out = self.apply(session_id, NrEvent::SessionEnd { reason: NrEndReason::PeerEnded }, now);
                self.endpoint.resume_session(session_id, message.payload_id.wrapping_add(1));
            }
            self.sessions.entry(session_id).or_insert_with(|| NrSession::new(session_id));
            let qname = String::from_utf8_lossy(&message.data).into_owned();
            let event = match self.resolve_domain(&qname, resolver) {
                Some(ip) => NrEvent::LoraDnsQuery { qname, ip },
                None => NrEvent::DnsFail { qname },
            };
            out.extend(self.apply(session_id, event, now));
            return out;
        }
        if let std::collections::btree_map::Entry::Vacant(slot) = self.sessions.entry(session_id) {
            if matches!(message.kind, MessageKind::Fin | MessageKind::Error) {
                return Vec::new();
            }
            // unknown session: run it through the table from the idle state
            slot.insert(NrSession::new(session_id));
        }
        match message.kind {
            MessageKind::TcpSyn | MessageKind::TcpAck => self.handle_handshake_message(&message, now).1,
            MessageKind::TlsData => self.apply(session_id, NrEvent::LoraTlsFrag { data: message.data }, now),
            MessageKind::Fin | MessageKind::Error => {
                self.apply(session_id, NrEvent::SessionEnd { reason: NrEndReason::PeerEnded }, now)
            }
            other => {
                self.errors.push((now, session_id, format!("unexpected {other} message from hub")));
                Vec::new()
            }
        }
    }

    fn record(
        &self,
        now: SimTime,
        session_id: u8,
        state: NrState,
        event: NrEventKind,
        next: NrState,
        actions: Vec<String>,
    ) -> TransitionRecord {
        TransitionRecord {
            t: now.as_secs_f64(),
            node: "NR",
            session: session_id,
            state: state.label(),
            event: event.label(),
            next_state: next.label(),
            actions,
        }
    }

    fn apply(&mut self, session_id: u8, event: NrEvent, now: SimTime) -> Vec<NrOutput> {
        let Some(state) = self.sessions.get(&session_id).map(|s| s.state) else { return Vec::new() };
        let step = nr_step(state, &event);
        // the SYN-ACK leaves the relay still waiting for the client's ACK
        let next = if event.kind() == NrEventKind::UpstreamSynAck { NrState::WaitAck } else { step.next };
        let labels = step.actions.iter().map(NrAction::label).collect();
        self.log.push(self.record(now, session_id, state, event.kind(), next, labels));
        if let Some(s) = self.sessions.get_mut(&session_id) {
            s.state = next;
        }
        let reason = match event {
            NrEvent::SessionEnd { reason } => Some(reason),
            _ => None,
        };

        let mut out = Vec::new();
        let mut notified = false;
        let mut corrupt = false;
        for action in step.actions {
            let result = self.execute(session_id, action, reason, &mut notified, now, &mut out);
            match result {
                Ok(()) => {}
                Err(NrError::StreamCorrupt(_)) => corrupt = true,
                Err(e) => self.errors.push((now, session_id, e.to_string())),
            }
        }
        if next == NrState::Error {
            self.log.push(self.record(
                now,
                session_id,
                NrState::Error,
                NrEventKind::SessionEnd,
                NrState::IdleWaitDns,
                Vec::new(),
            ));
            self.log.last_mut().expect("just pushed").event = "RESET";
        } else if event.kind() == NrEventKind::SynAckFail {
            self.teardown(session_id, now, &mut out);
        }
        if corrupt {
            out.extend(self.apply(session_id, NrEvent::SessionEnd { reason: NrEndReason::StreamCorrupt }, now));
        }
        out
    }

    fn execute(
        &mut self,
        session_id: u8,
        action: NrAction,
        reason: Option<NrEndReason>,
        notified: &mut bool,
        now: SimTime,
        out: &mut Vec<NrOutput>,
    ) -> Result<(), NrError> {
        match action {
            NrAction::Resolve { qname, ip } => {
                let s = self.sessions.get_mut(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
                s.qname = Some(qname);
                s.resolved = Some(ip);
            }
            NrAction::SendLora { kind, data } => {
                self.endpoint.send(kind, session_id, data)?;
            }
            NrAction::ModifyAndSendSyn { packet } => {
                let deadline = now + self.config.syn_ack_timeout;
                let syn = self.rewrite_syn(session_id, &packet, now)?;
                out.push(NrOutput::ToUpstream(syn));
                out.push(NrOutput::SynAckDeadline { session_id, at: deadline });
                let s = self.sessions.get_mut(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
                s.syn_ack_deadline = Some(deadline);
            }
            NrAction::CorrectTimestampAndSendSynAck { packet } => {
                let synack = self.rewrite_syn_ack(session_id, &packet)?;
                self.endpoint.send(MessageKind::TcpSynack, session_id, synack)?;
            }
            NrAction::ReportError { reason: text } => {
                self.errors.push((now, session_id, text));
                match reason {
                    Some(NrEndReason::PeerEnded) => {}
                    Some(NrEndReason::UpstreamClosed) => {
                        self.endpoint.send(MessageKind::Fin, session_id, vec![0])?;
                    }
                    _ => {
                        self.endpoint.send(MessageKind::Error, session_id, vec![1])?;
                    }
                }
                *notified = true;
            }
            NrAction::ForwardAck { packet } => {
                out.push(NrOutput::ToUpstream(self.forward_ack(session_id, &packet)?));
            }
            NrAction::ReassembleAndForward { data } => {
                out.extend(self.relay_upstream(session_id, &data)?.into_iter().map(NrOutput::ToUpstream));
            }
            NrAction::Cleanup => {
                if !*notified && reason != Some(NrEndReason::PeerEnded) {
                    self.endpoint.send(MessageKind::Error, session_id, vec![1])?;
                    *notified = true;
                }
                self.teardown(session_id, now, out);
            }
        }
        Ok(())
    }

    /// Outbound NAT and the relay's own TSval on the client's SYN.
    fn rewrite_syn(&mut self, session_id: u8, raw: &[u8], now: SimTime) -> Result<Vec<u8>, NrError> {
        let syn = parse_packet(raw)?;
        let header = syn.tcp().ok_or(PacketError::Malformed("SYN is not TCP"))?.clone();
        let relay_port = self.allocate_port();
        let mapping =
            NatMapping { client_ip: syn.src_ip, client_port: syn.src_port, relay_ip: self.config.relay_ip, relay_port };
        let mut rewritten = nat_rewrite(&syn, &mapping, NatDirection::Outbound)?;
        let tsval_orig = header.timestamp().map(|(tsval, _)| tsval);
        if tsval_orig.is_some() {
            let own_clock = (now.as_millis() & 0xFFFF_FFFF) as u32;
            rewritten = rewrite_timestamp(&rewritten, Some(own_clock), None)?;
        }
        let s = self.sessions.get_mut(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
        s.mapping = Some(mapping);
        s.server = Some(syn.dst());
        s.tsval_orig = tsval_orig;
        s.relay_next_seq = header.seq.wrapping_add(1);
        s.upstream_open = true;
        Ok(rewritten.raw)
    }

    /// TSecr correction and inbound NAT on the server's SYN-ACK.
    fn rewrite_syn_ack(&mut self, session_id: u8, raw: &[u8]) -> Result<Vec<u8>, NrError> {
        let correct = self.config.correct_timestamps;
        let s = self.sessions.get_mut(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
        let mapping = s.mapping.ok_or(NrError::NotRelaying(session_id))?;
        let mut synack = parse_packet(raw)?;
        if let Some(h) = synack.tcp() {
            s.server_next_seq = h.seq.wrapping_add(1);
        }
        if let (true, Some(tsval)) = (correct, s.tsval_orig) {
            synack = correct_syn_ack_timestamp(&synack, tsval)?;
        }
        let synack = nat_rewrite(&synack, &mapping, NatDirection::Inbound)?;
        s.syn_ack_deadline = None;
        s.awaiting_final_ack = true;
        Ok(synack.raw)
    }

    fn forward_ack(&mut self, session_id: u8, raw: &[u8]) -> Result<Vec<u8>, NrError> {
        let s = self.sessions.get(&session_id).ok_or(NrError::SessionUnknown(session_id))?;
        let mapping = s.mapping.ok_or(NrError::NotRelaying(session_id))?;
        let ack = parse_packet(raw)?;
        Ok(nat_rewrite(&ack, &mapping, NatDirection::Outbound)?.raw)
    }

    fn allocate_port(&mut self) -> u16 {
        let port = self.next_port;
        self.next_port = match self.next_port.checked_add(1) {
            Some(p) => p,
            None => self.config.first_relay_port,
        };
        port
    }

    /// Closes the server side if open and drops the session.
    fn teardown(&mut self, session_id: u8, now: SimTime, out: &mut Vec<NrOutput>) {
        let Some(s) = self.sessions.remove(&session_id) else { return };
        if s.upstream_open {
            match s.to_server(TcpFlags::FIN | TcpFlags::ACK, Vec::new()) {
                Ok(fin) => out.push(NrOutput::ToUpstream(fin)),
                Err(e) => self.errors.push((now, session_id, e.to_string())),
            }
        }
        self.endpoint.forget_session(session_id);
    }
}
