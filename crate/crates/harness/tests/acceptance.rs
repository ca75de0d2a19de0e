//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::net::{Ipv4Addr, SocketAddrV4};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lotls_core::end_hub::{eh_step, EhAction, EhEvent, EhEventKind, EhState, EndReason, EH_TRANSITIONS};
use lotls_core::frame_codec::{
    chunk_count, decode_frame, encode_frame, fragment, reassemble, reliable_send, Chunk, DeliveryResult, FrameKind,
    LoRaFrame, MessageKind, PayloadMessage, ReassemblyResult, ReassemblyStore, RetryPolicy, L_MAX, MAX_FRAME_LEN,
};
use lotls_core::link::SimLink;
use lotls_core::lora_channel::{airtime, ChannelConfig, LoraChannel, NodeId, TransmitOutcome};
use lotls_core::net_relay::{
    nr_step, NetRelay, NrAction, NrConfig, NrEndReason, NrEvent, NrEventKind, NrOutput, NrState, StaticResolver,
    NR_TRANSITIONS,
};
use lotls_core::packet_engine::{
    correct_syn_ack_timestamp, parse_packet, PacketView, TcpFlags, TcpHeader, TcpOption, TCP_OPT_TIMESTAMP,
};
use lotls_core::sentinel::{Decision, SentinelConfig, SentinelState};
use lotls_core::SimTime;
use lotls_harness::metrics::{compute_total_delay, duty_cycle_estimate, StageDelays};
use lotls_harness::scenario::{ScenarioConfig, TlsMode};
use lotls_harness::sentinel_exp::{sentinel_experiment, SentinelExperiment};
use lotls_harness::sim::run_scenario;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, || format!("took {took:.2?}, limit {limit:?}"))
}

fn fragmentation() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let max = 255 * L_MAX;
    for n in 0..10_000u32 {
        let len = if n < 4 { [1, L_MAX, L_MAX + 1, max][n as usize] } else { rng.random_range(1..=max) };
        let mut data = vec![0u8; len];
        rng.fill(&mut data[..]);
        let message = PayloadMessage { payload_id: n as u16, kind: MessageKind::TlsData, session_id: 0, data };
        let mut chunks = fragment(&message, L_MAX).map_err(|e| format!("len {len}: {e}"))?;
        check(chunks.len() == len.div_ceil(L_MAX) && chunks.len() == chunk_count(len, L_MAX), || {
            format!("len {len}: {} chunks", chunks.len())
        })?;
        let last = len - (chunks.len() - 1) * L_MAX;
        check(chunks.last().map(|c| c.data.len()) == Some(last), || format!("len {len}: last chunk size"))?;
        check(chunks[..chunks.len() - 1].iter().all(|c| c.data.len() == L_MAX), || {
            format!("len {len}: inner chunk size")
        })?;
        chunks.reverse();
        check(reassemble(&chunks) == ReassemblyResult::Complete(message.data.clone()), || {
            format!("len {len}: reassembly differs")
        })?;
    }
    within_time(started, Duration::from_secs(10))?;
    Ok(format!("10^4 payloads in {:.2?}", started.elapsed()))
}

fn random_frame(rng: &mut ChaCha8Rng) -> LoRaFrame {
    let session_id = rng.random();
    let payload_id = rng.random();
    let total: u8 = rng.random_range(1..=255);
    let index = rng.random_range(1..=total);
    if rng.random_bool(0.1) {
        return LoRaFrame::ack(session_id, payload_id, total, index);
    }
    let mut data = vec![0u8; rng.random_range(1..=L_MAX)];
    rng.fill(&mut data[..]);
    let kind = *MessageKind::ALL.choose(rng).expect("kinds exist");
    LoRaFrame::data(&Chunk { payload_id, total_chunks: total, chunk_index: index, data }, kind, session_id)
}

fn wire() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut samples = Vec::new();
    for i in 0..10_000 {
        let frame = random_frame(&mut rng);
        let bytes = encode_frame(&frame).map_err(|e| e.to_string())?;
        check(bytes.len() <= MAX_FRAME_LEN, || format!("frame of {} bytes", bytes.len()))?;
        check(decode_frame(&bytes).as_ref() == Ok(&frame), || format!("round trip differs for {frame:?}"))?;
        if i % 100 == 0 {
            samples.push(bytes);
        }
    }
    let mut flips = 0;
    for bytes in &samples {
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            check(decode_frame(&bad).is_err(), || format!("flip of bit {bit} accepted"))?;
            flips += 1;
        }
    }
    Ok(format!("10^4 round trips, {} frames, {flips} single-bit flips rejected", samples.len()))
}

fn lossy_link(loss: f64, seed: u64, retries: u32) -> (SimLink, RetryPolicy) {
    let config = ChannelConfig { loss_probability: loss, rng_seed: seed, ..ChannelConfig::default() };
    let policy = RetryPolicy::for_channel(&config, retries).expect("valid channel");
    let store = ReassemblyStore::for_policy(&policy);
    (SimLink::new(LoraChannel::new(config).expect("valid channel"), NodeId::EndHub, store), policy)
}

fn arq_pdr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let messages: Vec<PayloadMessage> = (0..1000u16)
        .map(|i| {
            let mut data = vec![0u8; rng.random_range(1..=3 * L_MAX)];
            rng.fill(&mut data[..]);
            PayloadMessage { payload_id: i, kind: MessageKind::TlsData, session_id: 1, data }
        })
        .collect();

    let (mut link, policy) = lossy_link(0.2, 30, 10);
    for m in &messages {
        let result = reliable_send(m, &mut link, &policy, L_MAX).map_err(|e| e.to_string())?;
        check(matches!(result, DeliveryResult::Delivered { .. }), || format!("message {} failed", m.payload_id))?;
    }
    let delivered = link.delivered();
    check(delivered.len() == messages.len(), || format!("{} of 1000 delivered", delivered.len()))?;
    check(delivered.iter().zip(&messages).all(|(d, m)| d == m), || "delivered bytes differ".into())?;
    let pdr = delivered.len() as f64 / messages.len() as f64 * 100.0;

    let (mut bare, policy) = lossy_link(0.2, 31, 0);
    for m in &messages {
        reliable_send(m, &mut bare, &policy, L_MAX).map_err(|e| e.to_string())?;
    }
    let stats = bare.stats();
    let ratio = stats.data_delivered as f64 / stats.data_sent as f64;
    check((ratio - 0.80).abs() <= 0.03, || format!("per-frame delivery {ratio:.4} with no retries"))?;
    Ok(format!(
        "pdr {pdr:.1}% with 10 retries; per-frame delivery {ratio:.4} over {} frames with none",
        stats.data_sent
    ))
}

fn eh_sample(kind: EhEventKind) -> EhEvent {
    match kind {
        EhEventKind::DnsQuery => EhEvent::DnsQuery { qname: "api.test".into() },
        EhEventKind::DnsIpResp => EhEvent::DnsIpResp { ip: Ipv4Addr::new(203, 0, 113, 10) },
        EhEventKind::LocalSyn => EhEvent::LocalSyn { packet: vec![0x45; 60] },
        EhEventKind::SynAckReceived => EhEvent::SynAckReceived { packet: vec![0x45; 60] },
        EhEventKind::SynAckTimeout => EhEvent::SynAckTimeout,
        EhEventKind::LocalTlsOut => EhEvent::LocalTlsOut { data: vec![0x16; 517] },
        EhEventKind::LoraTlsIn => EhEvent::LoraTlsIn { data: vec![0x17; 55] },
        EhEventKind::LoraFragAck => EhEvent::LoraFragAck { payload_id: 3, chunk_index: 1 },
        EhEventKind::SessionEnd => EhEvent::SessionEnd { reason: EndReason::ClientFin },
    }
}

fn nr_sample(kind: NrEventKind) -> NrEvent {
    match kind {
        NrEventKind::LoraDnsQuery => {
            NrEvent::LoraDnsQuery { qname: "api.test".into(), ip: Ipv4Addr::new(203, 0, 113, 10) }
        }
        NrEventKind::DnsFail => NrEvent::DnsFail { qname: "nowhere.test".into() },
        NrEventKind::LoraSyn => NrEvent::LoraSyn { packet: vec![0x45; 60] },
        NrEventKind::UpstreamSynAck => NrEvent::UpstreamSynAck { packet: vec![0x45; 60] },
        NrEventKind::SynAckFail => NrEvent::SynAckFail,
        NrEventKind::LoraFinalAck => NrEvent::LoraFinalAck { packet: vec![0x45; 52] },
        NrEventKind::LoraTlsFrag => NrEvent::LoraTlsFrag { data: vec![0x17; 200] },
        NrEventKind::SessionEnd => NrEvent::SessionEnd { reason: NrEndReason::PeerEnded },
    }
}

fn action_names<T: std::fmt::Debug>(actions: &[T]) -> Vec<String> {
    actions.iter().map(|a| format!("{a:?}").split([' ', '(', '{']).next().unwrap_or_default().to_string()).collect()
}

/// Drives an undefined pair through a live relay and checks that the log
/// shows the error state followed by the reset to idle.
fn relay_resets_after_undefined_pair() -> Result<(), String> {
    let mut relay = NetRelay::new(NrConfig::default());
    let mut resolver = StaticResolver::default();
    let chunk = Chunk { payload_id: 0, total_chunks: 1, chunk_index: 1, data: vec![0x17; 20] };
    let frame = encode_frame(&LoRaFrame::data(&chunk, MessageKind::TlsData, 7)).map_err(|e| e.to_string())?;
    relay.on_lora_frame(&frame, SimTime::ZERO, &mut resolver);
    let states: Vec<(&str, &str)> = relay.log().iter().map(|r| (r.state, r.next_state)).collect();
    check(states == [("S0_IDLE_WAIT_DNS", "S4_ERROR"), ("S4_ERROR", "S0_IDLE_WAIT_DNS")], || {
        format!("relay log {states:?}")
    })?;
    check(relay.session(7).is_none(), || "relay kept the session".into())
}

fn fsm() -> Outcome {
    let mut rows = 0;
    for &(state, kind, next) in &EH_TRANSITIONS {
        let step = eh_step(state, &eh_sample(kind));
        check(step.next == next, || format!("EH ({state:?},{kind:?}) went to {:?}", step.next))?;
        let names = action_names(&step.actions);
        let expected: &[&str] = match kind {
            EhEventKind::DnsQuery | EhEventKind::LocalSyn => &["SendLora"],
            EhEventKind::DnsIpResp => &["SpoofDnsResponse"],
            EhEventKind::SynAckReceived => &["SendFinalAck"],
            EhEventKind::SynAckTimeout => &["SendFinAckToClient", "LogError"],
            EhEventKind::LocalTlsOut => &["ChunkAndSend"],
            EhEventKind::LoraTlsIn => &["ReassembleAndForward"],
            EhEventKind::SessionEnd => &["SendFinAckToClient", "Cleanup"],
            EhEventKind::LoraFragAck => &[],
        };
        check(names == expected, || format!("EH ({state:?},{kind:?}) actions {names:?}"))?;
        rows += 1;
    }
    let catch_all = eh_step(EhState::WaitDnsResp, &eh_sample(EhEventKind::LocalSyn));
    check(catch_all.next == EhState::Error && catch_all.actions == [EhAction::Cleanup], || "EH catch-all row".into())?;
    rows += 1;

    for &(state, kind, next) in &NR_TRANSITIONS {
        let step = nr_step(state, &nr_sample(kind));
        check(step.next == next, || format!("NR ({state:?},{kind:?}) went to {:?}", step.next))?;
        let names = action_names(&step.actions);
        let expected: &[&str] = match kind {
            NrEventKind::LoraDnsQuery => &["Resolve", "SendLora"],
            NrEventKind::DnsFail => &["ReportError", "Cleanup"],
            NrEventKind::LoraSyn => &["ModifyAndSendSyn"],
            NrEventKind::UpstreamSynAck => &["CorrectTimestampAndSendSynAck"],
            NrEventKind::SynAckFail => &["ReportError"],
            NrEventKind::LoraFinalAck => &["ForwardAck"],
            NrEventKind::LoraTlsFrag => &["ReassembleAndForward"],
            NrEventKind::SessionEnd => &[],
        };
        check(names == expected, || format!("NR ({state:?},{kind:?}) actions {names:?}"))?;
        rows += 1;
    }
    for state in NrState::ALL {
        let step = nr_step(state, &nr_sample(NrEventKind::SessionEnd));
        check(step.next == NrState::IdleWaitDns && action_names(&step.actions) == ["ReportError", "Cleanup"], || {
            format!("NR ({state:?}, session end) gave {step:?}")
        })?;
    }
    rows += 1;

    let eh_undefined: Vec<(EhState, EhEventKind)> = EhState::ALL
        .into_iter()
        .flat_map(|s| EhEventKind::ALL.into_iter().map(move |k| (s, k)))
        .filter(|&(s, k)| !EH_TRANSITIONS.iter().any(|&(ts, tk, _)| ts == s && tk == k))
        .collect();
    let nr_undefined: Vec<(NrState, NrEventKind)> = NrState::ALL
        .into_iter()
        .flat_map(|s| NrEventKind::ALL.into_iter().map(move |k| (s, k)))
        .filter(|&(s, k)| k != NrEventKind::SessionEnd && !NR_TRANSITIONS.iter().any(|&(ts, tk, _)| ts == s && tk == k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        if rng.random_bool(0.5) {
            let &(state, kind) = eh_undefined.choose(&mut rng).expect("undefined EH pairs exist");
            let step = eh_step(state, &eh_sample(kind));
            check(step.next == EhState::Error && step.actions == [EhAction::Cleanup], || {
                format!("EH ({state:?},{kind:?}) gave {step:?}")
            })?;
        } else {
            let &(state, kind) = nr_undefined.choose(&mut rng).expect("undefined NR pairs exist");
            let step = nr_step(state, &nr_sample(kind));
            check(step.next == NrState::Error && step.actions == [NrAction::Cleanup], || {
                format!("NR ({state:?},{kind:?}) gave {step:?}")
            })?;
        }
    }
    relay_resets_after_undefined_pair()?;
    Ok(format!("{rows} table rows, 50 fuzzed undefined pairs, error state resets to idle"))
}

fn tsecr_of(packet: &PacketView) -> Option<u32> {
    packet.tcp()?.timestamp().map(|(_, echo)| echo)
}

/// Runs a SYN and the server's SYN-ACK through a live relay and returns the
/// SYN-ACK it puts on the radio.
fn relay_syn_ack(tsval: u32, server_echo: u32, seed: u64) -> Result<PacketView, String> {
    let mut relay = NetRelay::new(NrConfig::default());
    let mut resolver = StaticResolver::default();
    let server = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 10), 443);
    resolver.names.insert("api.test".into(), *server.ip());
    let dns = Chunk { payload_id: 0, total_chunks: 1, chunk_index: 1, data: b"api.test".to_vec() };
    let frame = encode_frame(&LoRaFrame::data(&dns, MessageKind::DnsQuery, 2)).map_err(|e| e.to_string())?;
    relay.on_lora_frame(&frame, SimTime::ZERO, &mut resolver);

    let mut syn = TcpHeader::new(seed as u32, 0, TcpFlags::SYN);
    syn.options = vec![TcpOption::mss(1460), TcpOption::sack_permitted(), TcpOption::timestamp(tsval, 0)];
    let client = SocketAddrV4::new(Ipv4Addr::new(192, 168, 4, 2), 40_000 + (seed % 20_000) as u16);
    let syn = PacketView::new_tcp(client, server, syn, Vec::new()).map_err(|e| e.to_string())?;
    let message = PayloadMessage { payload_id: 1, kind: MessageKind::TcpSyn, session_id: 2, data: syn.raw.clone() };
    let (_, out) = relay.handle_handshake_message(&message, SimTime::from_secs_f64(1.0));
    let upstream = out
        .iter()
        .find_map(|o| match o {
            NrOutput::ToUpstream(p) => parse_packet(p).ok(),
            _ => None,
        })
        .ok_or("relay sent no SYN upstream")?;

    let mut reply =
        TcpHeader::new(77, upstream.tcp().map_or(0, |h| h.seq.wrapping_add(1)), TcpFlags::SYN | TcpFlags::ACK);
    reply.options = vec![TcpOption::mss(1460), TcpOption::timestamp(0xdead_beef, server_echo)];
    let reply = PacketView::new_tcp(server, upstream.src(), reply, Vec::new()).map_err(|e| e.to_string())?;
    relay.on_upstream_packet(&reply.raw, SimTime::from_secs_f64(1.1));
    while let Some(out) = relay.poll_transmit() {
        let Ok(frame) = decode_frame(&out.bytes) else { continue };
        if frame.kind == FrameKind::Data(MessageKind::TcpSynack) {
            return parse_packet(&frame.payload).map_err(|e| e.to_string());
        }
        if !frame.is_ack() {
            let ack = LoRaFrame::ack(frame.session_id, frame.payload_id, frame.total_chunks, frame.chunk_index);
            let ack = encode_frame(&ack).map_err(|e| e.to_string())?;
            relay.on_lora_frame(&ack, SimTime::from_secs_f64(1.2), &mut resolver);
        }
    }
    Err("relay sent no SYN-ACK over the radio".into())
}

fn timestamp_correction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    for i in 0..100u64 {
        let tsval: u32 = rng.random();
        let echo: u32 = rng.random();
        let radio = relay_syn_ack(tsval, echo, i)?;
        check(tsecr_of(&radio) == Some(tsval), || {
            format!("pair {i}: relay emitted TSecr {:?}, want {tsval}", tsecr_of(&radio))
        })?;

        let server = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 10), 443);
        let client = SocketAddrV4::new(Ipv4Addr::new(192, 168, 4, 2), 50_000);
        let mut h = TcpHeader::new(rng.random(), rng.random(), TcpFlags::SYN | TcpFlags::ACK);
        h.options = vec![
            TcpOption::mss(1460),
            TcpOption::sack_permitted(),
            TcpOption::timestamp(rng.random(), echo),
            TcpOption::nop(),
            TcpOption::window_scale(7),
        ];
        let syn_ack = PacketView::new_tcp(server, client, h, Vec::new()).map_err(|e| e.to_string())?;
        let fixed = correct_syn_ack_timestamp(&syn_ack, tsval).map_err(|e| e.to_string())?;
        check(fixed.checksums_valid(), || format!("pair {i}: checksum invalid after correction"))?;
        check(tsecr_of(&fixed) == Some(tsval), || format!("pair {i}: TSecr not corrected"))?;

        let ts_at = syn_ack.raw.windows(2).position(|w| w == [TCP_OPT_TIMESTAMP, 10]).ok_or("no timestamp option")?;
        let footprint = [ts_at + 6, ts_at + 7, ts_at + 8, ts_at + 9, 20 + 16, 20 + 17];
        let changed: Vec<usize> = (0..syn_ack.raw.len()).filter(|&k| syn_ack.raw[k] != fixed.raw[k]).collect();
        check(syn_ack.raw.len() == fixed.raw.len(), || format!("pair {i}: length changed"))?;
        check(changed.iter().all(|k| footprint.contains(k)), || format!("pair {i}: bytes {changed:?} changed"))?;
        let tsecr_bytes = changed.iter().filter(|&&k| (ts_at + 6..ts_at + 10).contains(&k)).count();
        check(tsecr_bytes == (tsval ^ echo).to_be_bytes().iter().filter(|b| **b != 0).count(), || {
            format!("pair {i}: TSecr bytes changed {tsecr_bytes}")
        })?;
        if changed.len() == 6 {
            exact += 1;
        }
    }
    Ok(format!("100 pairs echo the client TSval; diffs stay in the 6-byte footprint ({exact} touch all 6)"))
}

fn real_tls(loss: f64) -> Result<String, String> {
    let mut config = ScenarioConfig { mode: TlsMode::RealTls, seed: 6, ..ScenarioConfig::default() };
    config.channel.loss_probability = loss;
    config.retry.max_retries = 10;
    let expected = config.request.body.clone().into_bytes();
    let run = run_scenario(config).map_err(|e| e.to_string())?;
    let request = &run.report.requests[0];
    check(run.report.all_completed(), || format!("request failed: {:?}", request.error))?;
    let body = run.bodies[0].as_deref().unwrap_or_default();
    check(body == expected.as_slice() && body.len() == 55, || format!("body of {} bytes differs", body.len()))?;
    let leaks = run.plaintext_matches(&expected);
    check(leaks == 0, || format!("{leaks} radio frames carry the body in clear"))?;
    Ok(format!("p={loss}: {} frames, {} retransmissions", run.frames.len(), run.report.retransmissions))
}

fn end_to_end_tls() -> Outcome {
    let started = Instant::now();
    let lossless = real_tls(0.0)?;
    let lossy = real_tls(0.1)?;
    within_time(started, Duration::from_secs(60))?;
    Ok(format!("55-byte body intact, no plaintext on air; {lossless}; {lossy}"))
}

fn delay_arithmetic() -> Outcome {
    let total = compute_total_delay(&StageDelays::complete(0.146, 0.3915, 9.9, 3.583)).map_err(|e| e.to_string())?;
    check((total.total - 14.02).abs() <= 0.005, || format!("total {}", total.total))?;
    check((total.share_percent[2] - 71.0).abs() <= 1.0, || format!("tls share {}", total.share_percent[2]))?;
    let mut config = ScenarioConfig::default();
    config.request.count = 20;
    let run = run_scenario(config).map_err(|e| e.to_string())?;
    check(run.report.all_completed(), || "calibration run failed".into())?;
    let simulated = run.report.mean_total;
    check((simulated - 14.02).abs() <= 4.0, || format!("simulated total {simulated:.3}s"))?;
    Ok(format!("total {:.4}s, tls share {:.1}%; simulated total {simulated:.3}s", total.total, total.share_percent[2]))
}

fn airtime_band() -> Outcome {
    let narrow = ChannelConfig { bandwidth_hz: 125_000, ..ChannelConfig::default() };
    let wide = ChannelConfig { bandwidth_hz: 500_000, ..ChannelConfig::default() };
    let mut channel = LoraChannel::new(narrow.clone()).map_err(|e| e.to_string())?;
    let handshake = vec![0x16u8; 3000];
    let message = PayloadMessage { payload_id: 0, kind: MessageKind::TlsData, session_id: 0, data: handshake };
    for chunk in fragment(&message, L_MAX).map_err(|e| e.to_string())? {
        let bytes = encode_frame(&LoRaFrame::data(&chunk, MessageKind::TlsData, 0)).map_err(|e| e.to_string())?;
        let at = channel.busy_until();
        check(matches!(channel.transmit(&bytes, NodeId::NetRelay, at), Ok(TransmitOutcome::Scheduled(_))), || {
            "frame not carried".into()
        })?;
    }
    let total = channel.ledger().total_airtime(None);
    check((3.0..=5.0).contains(&total), || format!("3000 B took {total:.3}s of airtime"))?;
    for len in 1..=255 {
        let a = airtime(len, &wide).map_err(|e| e.to_string())?;
        let b = airtime(len, &narrow).map_err(|e| e.to_string())?;
        check(a == b / 4.0, || format!("{len} B: {a} vs {b}/4"))?;
    }
    Ok(format!(
        "3000 B in {} frames: {total:.3}s at 125 kHz; 500 kHz is exactly a quarter",
        channel.ledger().entries().len()
    ))
}

fn duty_cycle() -> Outcome {
    let d = duty_cycle_estimate(14.0, 2.05, 1200.0).map_err(|e| e.to_string())?;
    check(format!("{:.2}", d.percent) == "1.17" && (d.percent - 1.17).abs() <= 0.01, || format!("{}%", d.percent))?;
    check((d.spread_percent - 0.17).abs() <= 0.01, || format!("spread {}%", d.spread_percent))?;
    Ok(format!("{:.2}% ± {:.2}%", d.percent, d.spread_percent))
}

fn sentinel_reproduction() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    for (rate, target, tol) in [(0.05, 13.5, 3.0), (0.1, 8.6, 3.0), (1.0, 1.3, 1.5)] {
        let exp = SentinelExperiment { runs: 10, seed: 10, ..SentinelExperiment::new(rate) };
        let result = sentinel_experiment(&exp).map_err(|e| e.to_string())?;
        let admitted = result.admitted.mean;
        check((admitted - target).abs() <= tol, || {
            format!("rate {rate}: admitted {admitted:.2}, want {target}±{tol}")
        })?;
        if rate == 1.0 {
            let limited = result.rejected_rate.mean;
            check(limited <= 2.0, || format!("rate 1.0: {limited:.2} rate-limit rejections"))?;
        }
        parts.push(format!(
            "{rate}/s: {:.2}/{:.2}/{:.2}",
            admitted, result.rejected_concurrency.mean, result.rejected_rate.mean
        ));
    }
    within_time(started, Duration::from_secs(30))?;
    Ok(format!("admitted/concurrency/rate {}", parts.join(", ")))
}

#[derive(Debug, Clone)]
enum Op {
    Admit(f64),
    Release,
    Refill(f64),
}

fn sentinel_safety() -> Outcome {
    let op = prop_oneof![(0.0..30.0f64).prop_map(Op::Admit), Just(Op::Release), (0.0..30.0f64).prop_map(Op::Refill),];
    let config =
        (1u32..4, 1.0..5.0f64, 0.01..2.0f64).prop_map(|(n_max, t_max, rho)| SentinelConfig { n_max, t_max, rho });
    let mut runner =
        TestRunner::new(ProptestConfig { cases: 100_000, failure_persistence: None, ..ProptestConfig::default() });
    let result = runner.run(&(config, prop::collection::vec(op, 1..40)), |(config, ops)| {
        let mut state = SentinelState::new(config, SimTime::ZERO).expect("valid config");
        let mut now = 0.0;
        for op in ops {
            match op {
                Op::Admit(dt) => {
                    now += dt;
                    let before = state.n_active();
                    let decision = state.admit(SimTime::from_secs_f64(now));
                    prop_assert!(decision != Decision::Admitted || before < config.n_max);
                }
                Op::Release => {
                    let before = state.n_active();
                    prop_assert_eq!(state.release().is_ok(), before > 0);
                }
                Op::Refill(dt) => {
                    now += dt;
                    prop_assert!(state.refill(SimTime::from_secs_f64(now)).is_ok());
                }
            }
            prop_assert!(state.n_active() <= config.n_max);
            prop_assert!((0.0..=config.t_max).contains(&state.tokens()));
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("10^5 operation sequences keep n_active <= N_max and 0 <= T <= T_max".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("fragmentation", fragmentation),
        ("wire format", wire),
        ("ARQ and delivery ratio", arq_pdr),
        ("FSM conformance", fsm),
        ("timestamp correction", timestamp_correction),
        ("end-to-end real TLS", end_to_end_tls),
        ("delay arithmetic", delay_arithmetic),
        ("airtime band", airtime_band),
        ("duty cycle", duty_cycle),
        ("sentinel reproduction", sentinel_reproduction),
        ("sentinel safety", sentinel_safety),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {reason} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
