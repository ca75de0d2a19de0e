//! Discrete-event run of one scenario on a single virtual clock.
//!
//! Devices, the hub, the relay and the web server exchange packets through
//! timed events. Each radio hop costs `processing_delay_per_hop` at both
//! ends: the sender prepares the frame before it goes on air, and the
//! receiver handles it after it lands.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::net::SocketAddrV4;
use std::time::Duration;

use lotls_core::end_hub::{EhConfig, EhOutput, EndHub, TransitionRecord};
use lotls_core::endpoint::Outgoing;
use lotls_core::frame_codec::{decode_frame, FrameKind};
use lotls_core::lora_channel::{duty_cycle, AirtimeLedger, ChannelError, LoraChannel, NodeId, TransmitOutcome};
use lotls_core::net_relay::{NetRelay, NrConfig, NrOutput, StaticResolver};
use lotls_core::sentinel::SentinelError;
use lotls_core::SimTime;
use serde::Serialize;
use thiserror::Error;

use crate::device::{Device, DeviceOutput, RequestOutcome};
use crate::metrics::{
    compute_pdr, compute_total_delay, duty_cycle_estimate, mean, std_dev, MetricsError, MetricsReport, RequestMetrics,
    StageDelays,
};
use crate::scenario::{ScenarioConfig, ScenarioError, TlsMode, Topology};
use crate::server::WebServer;
use crate::tls::{RealTlsContext, ScriptedTls, TlsError, TlsFactory};

/// Nothing is scheduled this long after the last request start.
const HORIZON_AFTER_LAST_START: Duration = Duration::from_secs(900);
const TICK: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Tls(#[from] TlsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Sentinel(#[from] SentinelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFate {
    Delivered,
    Lost,
    Jammed,
}

/// One frame put on air.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AirFrame {
    pub t: f64,
    pub sender: NodeId,
    pub fate: FrameFate,
    pub airtime_s: f64,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub len: usize,
    pub ack: bool,
    pub session: Option<u8>,
    pub payload_id: Option<u16>,
    pub chunk: Option<(u8, u8)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    RequestStart { t: f64, index: usize, device: String },
    RequestEnd { t: f64, index: usize, completed: bool, error: Option<String> },
    Frame(AirFrame),
    Transition(TransitionRecord),
}

impl TraceEvent {
    pub fn t(&self) -> f64 {
        match self {
            TraceEvent::RequestStart { t, .. } | TraceEvent::RequestEnd { t, .. } => *t,
            TraceEvent::Frame(f) => f.t,
            TraceEvent::Transition(r) => r.t,
        }
    }
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceEvent>,
    pub ledger: AirtimeLedger,
    pub frames: Vec<AirFrame>,
    /// Body each request received, by request index.
    pub bodies: Vec<Option<Vec<u8>>>,
}

impl RunOutput {
    /// Frames whose bytes contain `needle`.
    pub fn plaintext_matches(&self, needle: &[u8]) -> usize {
        if needle.is_empty() {
            return 0;
        }
        self.frames.iter().filter(|f| f.bytes.windows(needle.len()).any(|w| w == needle)).count()
    }
}

#[derive(Debug)]
enum Event {
    StartRequest(usize),
    DeviceTimer { device: usize, token: u64 },
    LanToHub(Vec<u8>),
    HubToLan(Vec<u8>),
    RadioReady(NodeId),
    RadioIdle,
    FrameRx { to: NodeId, bytes: Vec<u8> },
    AckTimer { node: NodeId, token: u64 },
    HubSynAckDeadline(u8),
    RelaySynAckDeadline(u8),
    ToServer(Vec<u8>),
    FromServer(Vec<u8>),
    Tick,
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Default)]
struct Radio {
    pending: Option<Outgoing>,
    tx_until: SimTime,
}

struct Simulation {
    config: ScenarioConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    live_events: usize,
    channel: LoraChannel,
    hub: EndHub,
    relay: NetRelay,
    resolver: StaticResolver,
    server: WebServer,
    devices: Vec<Device>,
    tls: TlsFactory,
    radios: [Radio; 2],
    processing: Duration,
    ack_timeout: Duration,
    frames: Vec<AirFrame>,
    events: Vec<TraceEvent>,
    outcomes: Vec<Option<(SimTime, RequestOutcome)>>,
    data_frames_delivered: u64,
}

fn radio_index(node: NodeId) -> usize {
    match node {
        NodeId::EndHub => 0,
        NodeId::NetRelay => 1,
    }
}

impl Simulation {
    fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let retry = config.retry_policy()?;
        let mut channel_config = config.channel.clone();
        channel_config.rng_seed ^= config.seed;
        let channel = LoraChannel::new(channel_config)?;

        let hub_config = EhConfig { retry, l_max: config.l_max, sentinel: config.sentinel, ..EhConfig::default() };
        let hub = EndHub::new(hub_config, SimTime::ZERO)?;
        let relay = NetRelay::new(NrConfig { retry, l_max: config.l_max, ..NrConfig::default() });

        let mut resolver = StaticResolver::default();
        resolver.names.insert(config.request.qname.to_ascii_lowercase(), config.server.ip);

        let body = config.request.body.as_bytes().to_vec();
        let tls = match config.mode {
            TlsMode::RealTls => TlsFactory::Real {
                context: RealTlsContext::new(&config.request.qname)?,
                host: config.request.qname.clone(),
                path: config.request.path.clone(),
                body,
            },
            TlsMode::SimulatedTls => TlsFactory::Scripted {
                script: ScriptedTls { sizes: config.sim_tls.clone(), seed: config.seed },
                host: config.request.qname.clone(),
                path: config.request.path.clone(),
                body,
            },
        };
        let server_addr = SocketAddrV4::new(config.server.ip, config.server.port);
        let server = WebServer::new(server_addr, tls.clone(), config.seed.wrapping_add(0x5e4e));
        let devices = config
            .topology
            .device_addresses()
            .into_iter()
            .enumerate()
            .map(|(i, ip)| {
                Device::new(
                    Topology::device_name(i),
                    ip,
                    config.request.qname.clone(),
                    config.server.port,
                    config.seed.wrapping_mul(31).wrapping_add(i as u64),
                )
            })
            .collect();

        let processing = Duration::from_secs_f64(config.processing_delay_per_hop);
        let outcomes = vec![None; config.request.count];
        Ok(Simulation {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            live_events: 0,
            channel,
            hub,
            relay,
            resolver,
            server,
            devices,
            tls,
            radios: Default::default(),
            processing,
            ack_timeout: retry.ack_timeout,
            frames: Vec::new(),
            events: Vec::new(),
            outcomes,
            data_frames_delivered: 0,
            config,
        })
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        if !matches!(event, Event::Tick) {
            self.live_events += 1;
        }
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        let interval = Duration::from_secs_f64(self.config.request.interval);
        for i in 0..self.config.request.count {
            self.schedule(SimTime::ZERO + interval * i as u32, Event::StartRequest(i));
        }
        self.schedule(SimTime::ZERO + TICK, Event::Tick);
        let horizon = SimTime::ZERO + interval * (self.config.request.count as u32) + HORIZON_AFTER_LAST_START;

        while let Some(Reverse(next)) = self.queue.pop() {
            if next.at > horizon {
                break;
            }
            self.now = next.at;
            let tick = matches!(next.event, Event::Tick);
            if !tick {
                self.live_events -= 1;
            }
            self.handle(next.event)?;
            self.pump(NodeId::EndHub);
            self.pump(NodeId::NetRelay);
            if tick && self.live_events > 0 {
                self.schedule(self.now + TICK, Event::Tick);
            }
        }
        self.finish()
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        let now = self.now;
        match event {
            Event::StartRequest(index) => {
                let d = index % self.devices.len();
                if self.devices[d].busy() {
                    self.schedule(now + TICK, Event::StartRequest(index));
                    return Ok(());
                }
                self.events.push(TraceEvent::RequestStart {
                    t: now.as_secs_f64(),
                    index,
                    device: self.devices[d].name.clone(),
                });
                let out = self.devices[d].start_request(index, now, &self.tls);
                self.on_device_outputs(d, out);
            }
            Event::DeviceTimer { device, token } => {
                let out = self.devices[device].on_timer(token, now);
                self.on_device_outputs(device, out);
            }
            Event::LanToHub(packet) => {
                let out = self.hub.on_lan_packet(&packet, now);
                self.on_hub_outputs(out);
            }
            Event::HubToLan(packet) => {
                let Ok(view) = lotls_core::packet_engine::parse_packet(&packet) else { return Ok(()) };
                if let Some(d) = self.devices.iter().position(|dev| dev.ip == view.dst_ip) {
                    let out = self.devices[d].on_packet(&packet, now);
                    self.on_device_outputs(d, out);
                }
            }
            Event::RadioReady(node) => self.radio_ready(node)?,
            Event::RadioIdle => {}
            Event::FrameRx { to, bytes } => match to {
                NodeId::EndHub => {
                    let out = self.hub.on_lora_frame(&bytes, now);
                    self.on_hub_outputs(out);
                }
                NodeId::NetRelay => {
                    let out = self.relay.on_lora_frame(&bytes, now, &mut self.resolver);
                    self.on_relay_outputs(out);
                }
            },
            Event::AckTimer { node, token } => match node {
                NodeId::EndHub => {
                    let out = self.hub.on_ack_timer(token, now);
                    self.on_hub_outputs(out);
                }
                NodeId::NetRelay => {
                    let out = self.relay.on_ack_timer(token, now, &mut self.resolver);
                    self.on_relay_outputs(out);
                }
            },
            Event::HubSynAckDeadline(session) => {
                let out = self.hub.on_syn_ack_deadline(session, now);
                self.on_hub_outputs(out);
            }
            Event::RelaySynAckDeadline(session) => {
                let out = self.relay.on_syn_ack_deadline(session, now);
                self.on_relay_outputs(out);
            }
            Event::ToServer(packet) => {
                let backbone = Duration::from_secs_f64(self.config.backbone_delay);
                for reply in self.server.on_packet(&packet, now) {
                    self.schedule(now + backbone, Event::FromServer(reply));
                }
            }
            Event::FromServer(packet) => {
                let out = self.relay.on_upstream_packet(&packet, now);
                self.on_relay_outputs(out);
            }
            Event::Tick => {
                let out = self.hub.tick(now);
                self.on_hub_outputs(out);
                let out = self.relay.tick(now, &mut self.resolver);
                self.on_relay_outputs(out);
            }
        }
        Ok(())
    }

    fn on_device_outputs(&mut self, device: usize, outputs: Vec<DeviceOutput>) {
        let lan = Duration::from_secs_f64(self.config.lan_delay);
        for output in outputs {
            match output {
                DeviceOutput::Packet(p) => self.schedule(self.now + lan, Event::LanToHub(p)),
                DeviceOutput::Timer { at, token } => self.schedule(at, Event::DeviceTimer { device, token }),
                DeviceOutput::Finished(outcome) => {
                    let completed = outcome.error.is_none() && outcome.body.is_some();
                    self.events.push(TraceEvent::RequestEnd {
                        t: self.now.as_secs_f64(),
                        index: outcome.index,
                        completed,
                        error: outcome.error.clone(),
                    });
                    let index = outcome.index;
                    self.outcomes[index] = Some((self.now, outcome));
                }
            }
        }
    }

    fn on_hub_outputs(&mut self, outputs: Vec<EhOutput>) {
        let lan = Duration::from_secs_f64(self.config.lan_delay);
        for output in outputs {
            match output {
                EhOutput::ToClient(p) => self.schedule(self.now + lan, Event::HubToLan(p)),
                EhOutput::SynAckDeadline { session_id, at } => self.schedule(at, Event::HubSynAckDeadline(session_id)),
            }
        }
    }

    fn on_relay_outputs(&mut self, outputs: Vec<NrOutput>) {
        let backbone = Duration::from_secs_f64(self.config.backbone_delay);
        for output in outputs {
            match output {
                NrOutput::ToUpstream(p) => self.schedule(self.now + backbone, Event::ToServer(p)),
                NrOutput::SynAckDeadline { session_id, at } => {
                    self.schedule(at, Event::RelaySynAckDeadline(session_id))
                }
            }
        }
    }

    /// Starts preparing the node's next frame if its radio is free.
    fn pump(&mut self, node: NodeId) {
        let radio = &self.radios[radio_index(node)];
        if radio.pending.is_some() || radio.tx_until > self.now {
            return;
        }
        let next = match node {
            NodeId::EndHub => self.hub.poll_transmit(),
            NodeId::NetRelay => self.relay.poll_transmit(),
        };
        if let Some(outgoing) = next {
            self.radios[radio_index(node)].pending = Some(outgoing);
            self.schedule(self.now + self.processing, Event::RadioReady(node));
        }
    }

    fn radio_ready(&mut self, node: NodeId) -> Result<(), SimError> {
        let now = self.now;
        if !self.channel.is_idle(now) {
            let free = self.channel.busy_until();
            self.schedule(free, Event::RadioReady(node));
            return Ok(());
        }
        let Some(outgoing) = self.radios[radio_index(node)].pending.take() else { return Ok(()) };
        let airtime = self.channel.airtime(outgoing.bytes.len())?;
        let outcome = self.channel.transmit(&outgoing.bytes, node, now)?;
        let fate = match outcome {
            TransmitOutcome::Scheduled(arrival) => {
                self.schedule(
                    arrival + self.processing,
                    Event::FrameRx { to: node.peer(), bytes: outgoing.bytes.clone() },
                );
                FrameFate::Delivered
            }
            TransmitOutcome::Lost => FrameFate::Lost,
            TransmitOutcome::Jammed => FrameFate::Jammed,
            TransmitOutcome::ChannelBusy => {
                let free = self.channel.busy_until();
                self.radios[radio_index(node)].pending = Some(outgoing);
                self.schedule(free, Event::RadioReady(node));
                return Ok(());
            }
        };
        let tx_end = self.channel.busy_until();
        self.radios[radio_index(node)].tx_until = tx_end;
        self.schedule(tx_end, Event::RadioIdle);
        if let Some(token) = outgoing.ack_timer {
            self.schedule(tx_end + self.ack_timeout, Event::AckTimer { node, token });
        }
        let decoded = decode_frame(&outgoing.bytes).ok();
        let ack = decoded.as_ref().is_some_and(|f| f.kind == FrameKind::ChunkAck);
        if !ack && fate == FrameFate::Delivered {
            self.data_frames_delivered += 1;
        }
        self.frames.push(AirFrame {
            t: now.as_secs_f64(),
            sender: node,
            fate,
            airtime_s: airtime,
            len: outgoing.bytes.len(),
            ack,
            session: decoded.as_ref().map(|f| f.session_id),
            payload_id: decoded.as_ref().map(|f| f.payload_id),
            chunk: decoded.as_ref().map(|f| (f.chunk_index, f.total_chunks)),
            bytes: outgoing.bytes,
        });
        Ok(())
    }

    fn finish(self) -> Result<RunOutput, SimError> {
        let expected = self.config.request.body.as_bytes();
        let mut requests = Vec::with_capacity(self.outcomes.len());
        let mut bodies = Vec::with_capacity(self.outcomes.len());
        let mut context: HashMap<usize, String> = HashMap::new();
        for (index, slot) in self.outcomes.iter().enumerate() {
            let device = self.devices[index % self.devices.len()].name.clone();
            let started_at = self
                .events
                .iter()
                .find_map(|e| match e {
                    TraceEvent::RequestStart { t, index: i, .. } if *i == index => Some(*t),
                    _ => None,
                })
                .unwrap_or(0.0);
            let Some((_, outcome)) = slot else {
                requests.push(RequestMetrics {
                    index,
                    device,
                    started_at,
                    stages: StageDelays::default(),
                    total: None,
                    completed: false,
                    body_matches: false,
                    body_len: 0,
                    error: Some(self.error_context("request did not finish")),
                });
                bodies.push(None);
                continue;
            };
            let body_matches = outcome.body.as_deref() == Some(expected);
            let completed = outcome.error.is_none() && body_matches;
            let error = match (&outcome.error, body_matches) {
                (Some(e), _) => Some(self.error_context(e)),
                (None, false) => Some("body differs from the server's".to_string()),
                (None, true) => None,
            };
            if let Some(e) = &error {
                context.insert(index, e.clone());
            }
            requests.push(RequestMetrics {
                index,
                device,
                started_at,
                stages: outcome.stages,
                total: compute_total_delay(&outcome.stages).ok().map(|t| t.total),
                completed,
                body_matches,
                body_len: outcome.body.as_ref().map_or(0, Vec::len),
                error,
            });
            bodies.push(outcome.body.clone());
        }

        let done: Vec<&RequestMetrics> = requests.iter().filter(|r| r.completed).collect();
        let stage =
            |f: fn(&StageDelays) -> Option<f64>| mean(&done.iter().filter_map(|r| f(&r.stages)).collect::<Vec<_>>());
        let mean_stages = if done.is_empty() {
            StageDelays::default()
        } else {
            StageDelays::complete(stage(|s| s.dns), stage(|s| s.tcp), stage(|s| s.tls), stage(|s| s.access))
        };
        let totals: Vec<f64> = done.iter().filter_map(|r| r.total).collect();
        let stage_share_percent = compute_total_delay(&mean_stages).map(|t| t.share_percent).unwrap_or([0.0; 4]);

        let hub_stats = self.hub.endpoint_stats();
        let relay_stats = self.relay.endpoint_stats();
        let packets_sent = hub_stats.messages_queued + relay_stats.messages_queued;
        let packets_delivered = (hub_stats.messages_delivered + relay_stats.messages_delivered).min(packets_sent);
        let frames_sent = self.frames.iter().filter(|f| !f.ack).count() as u64;
        let ledger = self.channel.ledger().clone();
        let simulated_time_s = self.now.as_secs_f64();

        let tls_time: f64 = done.iter().map(|r| r.stages.tls.unwrap_or(0.0) + r.stages.access.unwrap_or(0.0)).sum();
        let tls_bytes: usize = self
            .frames
            .iter()
            .filter(|f| !f.ack && f.fate == FrameFate::Delivered)
            .map(|f| f.len.saturating_sub(lotls_core::frame_codec::FRAME_OVERHEAD))
            .sum();

        let report = MetricsReport {
            mode: self.config.mode,
            seed: self.config.seed,
            completed: done.len(),
            mean_stages,
            mean_total: mean(&totals),
            std_total: std_dev(&totals),
            stage_share_percent,
            packets_sent,
            packets_delivered,
            pdr_percent: compute_pdr(packets_sent, packets_delivered).unwrap_or(0.0),
            frames_sent,
            frames_delivered: self.data_frames_delivered,
            frame_delivery_ratio: if frames_sent > 0 {
                self.data_frames_delivered as f64 / frames_sent as f64
            } else {
                0.0
            },
            retransmissions: hub_stats.retransmissions + relay_stats.retransmissions,
            throughput_bytes_per_s: if tls_time > 0.0 { tls_bytes as f64 / tls_time } else { 0.0 },
            airtime_total_s: ledger.total_airtime(None),
            radio_duty_cycle_percent: if simulated_time_s > 0.0 {
                duty_cycle(&ledger, simulated_time_s, NodeId::EndHub)?
            } else {
                0.0
            },
            duty_cycle: duty_cycle_estimate(mean(&totals), std_dev(&totals), self.config.duty_period)?,
            sentinel: self.hub.sentinel().tallies(),
            processing_delay_per_hop: self.config.processing_delay_per_hop,
            simulated_time_s,
            requests,
        };

        let mut trace = self.events;
        trace.extend(self.frames.iter().cloned().map(TraceEvent::Frame));
        trace.extend(self.hub.log().iter().cloned().map(TraceEvent::Transition));
        trace.extend(self.relay.log().iter().cloned().map(TraceEvent::Transition));
        trace.sort_by(|a, b| a.t().total_cmp(&b.t()));
        Ok(RunOutput { report, trace, ledger, frames: self.frames, bodies })
    }

    /// Device error plus the latest proxy errors.
    fn error_context(&self, device_error: &str) -> String {
        let mut parts = vec![device_error.to_string()];
        if let Some((t, s, e)) = self.hub.errors().last() {
            parts.push(format!("hub session {s} at {:.3}s: {e}", t.as_secs_f64()));
        }
        if let Some((t, s, e)) = self.relay.errors().last() {
            parts.push(format!("relay session {s} at {:.3}s: {e}", t.as_secs_f64()));
        }
        parts.join("; ")
    }
}

/// Runs every request of the scenario to completion or failure.
pub fn run_scenario(config: ScenarioConfig) -> Result<RunOutput, SimError> {
    Simulation::new(config)?.run()
}
