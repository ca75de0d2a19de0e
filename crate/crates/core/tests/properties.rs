//! Property tests for the codec, channel, packet and admission invariants.

use std::net::{Ipv4Addr, SocketAddrV4};

use lotls_core::frame_codec::{
    chunk_count, crc16, decode_frame, encode_frame, fragment, reassemble, Chunk, FrameKind, LoRaFrame, MessageKind,
    PayloadMessage, ReassemblyResult, FRAME_OVERHEAD, L_MAX,
};
use lotls_core::lora_channel::{airtime, ChannelConfig, LoraChannel, NodeId, TransmitOutcome};
use lotls_core::packet_engine::{
    correct_syn_ack_timestamp, nat_rewrite, parse_packet, tls_record_scan, NatDirection, NatMapping, PacketView,
    TcpFlags, TcpHeader, TcpOption, TlsRecordBuffer,
};
use lotls_core::sentinel::{Decision, SentinelConfig, SentinelState};
use lotls_core::SimTime;
use proptest::prelude::*;

fn message(data: Vec<u8>, payload_id: u16) -> PayloadMessage {
    PayloadMessage { payload_id, kind: MessageKind::TlsData, session_id: 3, data }
}

fn kind() -> impl Strategy<Value = MessageKind> {
    prop::sample::select(MessageKind::ALL.to_vec())
}

#[test]
fn crc_check_value() {
    // catalogue check value of CRC-16/CCITT-FALSE
    assert_eq!(crc16(b"123456789"), 0x29B1);
}

#[test]
fn overhead_is_eleven_bytes() {
    let chunk = Chunk { payload_id: 1, total_chunks: 1, chunk_index: 1, data: vec![0; L_MAX] };
    let frame = encode_frame(&LoRaFrame::data(&chunk, MessageKind::TlsData, 0)).unwrap();
    assert_eq!(FRAME_OVERHEAD, 11);
    assert_eq!(frame.len(), L_MAX + 11);
    assert_eq!(encode_frame(&LoRaFrame::ack(0, 1, 1, 1)).unwrap().len(), 11);
}

proptest! {
    #[test]
    fn fragments_reassemble_in_any_order(
        data in prop::collection::vec(any::<u8>(), 1..6000),
        l_max in 1..=L_MAX,
        seed in any::<u64>(),
    ) {
        prop_assume!(chunk_count(data.len(), l_max) <= 255);
        let m = message(data, 9);
        let mut chunks = fragment(&m, l_max).unwrap();
        prop_assert_eq!(chunks.len(), m.data.len().div_ceil(l_max));
        let n = chunks.len();
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(usize::from(c.chunk_index), i + 1);
            prop_assert_eq!(usize::from(c.total_chunks), n);
            let expected = if i + 1 < n { l_max } else { m.data.len() - (n - 1) * l_max };
            prop_assert_eq!(c.data.len(), expected);
        }
        // rotate and duplicate one chunk; exact duplicates are harmless
        let k = (seed as usize) % n;
        chunks.rotate_left(k);
        let dup = chunks[0].clone();
        chunks.push(dup);
        prop_assert_eq!(reassemble(&chunks), ReassemblyResult::Complete(m.data.clone()));
    }

    #[test]
    fn missing_chunks_are_reported(data in prop::collection::vec(any::<u8>(), 2 * L_MAX + 1..3000), drop in 0usize..3) {
        let chunks = fragment(&message(data, 1), L_MAX).unwrap();
        let mut partial = chunks.clone();
        let removed = partial.remove(drop);
        prop_assert_eq!(reassemble(&partial), ReassemblyResult::Incomplete(vec![removed.chunk_index]));
    }

    #[test]
    fn conflicting_duplicate_is_inconsistent(data in prop::collection::vec(any::<u8>(), 1..600), flip in any::<u8>()) {
        prop_assume!(flip != 0);
        let mut chunks = fragment(&message(data, 1), L_MAX).unwrap();
        let mut bad = chunks[0].clone();
        bad.data[0] ^= flip;
        chunks.push(bad);
        prop_assert_eq!(reassemble(&chunks), ReassemblyResult::Inconsistent);
    }

    #[test]
    fn frames_round_trip(
        kind in kind(),
        session in any::<u8>(),
        payload_id in any::<u16>(),
        (total, index) in (1u8..=255).prop_flat_map(|t| (Just(t), 1..=t)),
        data in prop::collection::vec(any::<u8>(), 1..=L_MAX),
    ) {
        let chunk = Chunk { payload_id, total_chunks: total, chunk_index: index, data };
        let frame = LoRaFrame::data(&chunk, kind, session);
        let bytes = encode_frame(&frame).unwrap();
        prop_assert_eq!(bytes.len(), chunk.data.len() + FRAME_OVERHEAD);
        let back = decode_frame(&bytes).unwrap();
        prop_assert_eq!(back.kind, FrameKind::Data(kind));
        prop_assert_eq!(back.chunk(), chunk);
    }

    #[test]
    fn truncated_frames_are_rejected(data in prop::collection::vec(any::<u8>(), 1..=L_MAX), cut in 1usize..20) {
        let chunk = Chunk { payload_id: 5, total_chunks: 1, chunk_index: 1, data };
        let bytes = encode_frame(&LoRaFrame::data(&chunk, MessageKind::TlsData, 0)).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(decode_frame(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn airtime_grows_with_length(len in 1usize..255, sf in 7u8..=12) {
        let config = ChannelConfig { spreading_factor: sf, bandwidth_hz: 125_000, ..ChannelConfig::default() };
        prop_assert!(airtime(len + 1, &config).unwrap() >= airtime(len, &config).unwrap());
    }

    #[test]
    fn half_duplex_channel_never_overlaps(
        gaps in prop::collection::vec((0.0..0.2f64, 1usize..=211, any::<bool>()), 1..60),
    ) {
        let mut channel = LoraChannel::new(ChannelConfig::default()).unwrap();
        let mut now = 0.0;
        let mut on_air: Vec<(f64, f64)> = Vec::new();
        for (gap, len, hub) in gaps {
            now += gap;
            let sender = if hub { NodeId::EndHub } else { NodeId::NetRelay };
            let at = SimTime::from_secs_f64(now);
            let idle = channel.is_idle(at);
            let outcome = channel.transmit(&vec![0; len], sender, at).unwrap();
            prop_assert_eq!(outcome == TransmitOutcome::ChannelBusy, !idle);
            if idle {
                on_air.push((now, channel.busy_until().as_secs_f64()));
            }
        }
        for pair in on_air.windows(2) {
            prop_assert!(pair[1].0 >= pair[0].1 - 1e-9);
        }
        let ledger_total = channel.ledger().total_airtime(None);
        let spans: f64 = on_air.iter().map(|(s, e)| e - s).sum();
        prop_assert!((ledger_total - spans).abs() < 1e-6);
    }

    #[test]
    fn nat_round_trip_restores_addresses(
        port in 1024u16..,
        relay_port in 1024u16..,
        seq in any::<u32>(),
        payload in prop::collection::vec(any::<u8>(), 0..300),
    ) {
        let client = SocketAddrV4::new(Ipv4Addr::new(192, 168, 4, 2), port);
        let server = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 10), 443);
        let mapping = NatMapping { client_ip: *client.ip(), client_port: port, relay_ip: Ipv4Addr::new(198, 51, 100, 1), relay_port };
        let out = PacketView::new_tcp(client, server, TcpHeader::new(seq, 0, TcpFlags::PSH | TcpFlags::ACK), payload.clone()).unwrap();
        let rewritten = nat_rewrite(&out, &mapping, NatDirection::Outbound).unwrap();
        prop_assert!(rewritten.checksums_valid());
        prop_assert_eq!(rewritten.src(), mapping.relay());
        prop_assert_eq!(rewritten.dst(), server);
        prop_assert_eq!(&rewritten.payload, &payload);

        let back = PacketView::new_tcp(server, mapping.relay(), TcpHeader::new(1, seq, TcpFlags::ACK), payload.clone()).unwrap();
        let inbound = nat_rewrite(&back, &mapping, NatDirection::Inbound).unwrap();
        prop_assert!(inbound.checksums_valid());
        prop_assert_eq!(inbound.dst(), client);
        prop_assert_eq!(parse_packet(&inbound.raw).unwrap(), inbound);
    }

    #[test]
    fn syn_ack_correction_only_touches_tsecr(tsval in any::<u32>(), own in any::<u32>(), echo in any::<u32>()) {
        let mut h = TcpHeader::new(1, 2, TcpFlags::SYN | TcpFlags::ACK);
        h.options = vec![TcpOption::mss(1460), TcpOption::timestamp(own, echo), TcpOption::nop(), TcpOption::window_scale(7)];
        let server = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 10), 443);
        let client = SocketAddrV4::new(Ipv4Addr::new(192, 168, 4, 2), 50_000);
        let syn_ack = PacketView::new_tcp(server, client, h, Vec::new()).unwrap();
        let fixed = correct_syn_ack_timestamp(&syn_ack, tsval).unwrap();
        prop_assert!(fixed.checksums_valid());
        prop_assert_eq!(fixed.tcp().unwrap().timestamp(), Some((own, tsval)));
        let changed = syn_ack.raw.iter().zip(&fixed.raw).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= 6);
    }

    #[test]
    fn tls_records_survive_any_split(
        bodies in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..400), 1..6),
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..8),
    ) {
        let mut stream = Vec::new();
        let mut records = Vec::new();
        for body in &bodies {
            let mut r = vec![0x17, 0x03, 0x03];
            r.extend_from_slice(&(body.len() as u16).to_be_bytes());
            r.extend_from_slice(body);
            stream.extend_from_slice(&r);
            records.push(r);
        }
        let (whole, rest) = tls_record_scan(&stream).unwrap();
        prop_assert_eq!(&whole, &records);
        prop_assert!(rest.is_empty());

        let mut points: Vec<usize> = cuts.iter().map(|c| c.index(stream.len() + 1)).collect();
        points.sort_unstable();
        let mut buffer = TlsRecordBuffer::new();
        let mut got = Vec::new();
        let mut last = 0;
        for p in points.into_iter().chain([stream.len()]) {
            got.extend(buffer.push(&stream[last..p]).unwrap());
            last = p;
        }
        prop_assert_eq!(got, records);
        prop_assert!(buffer.pending().is_empty());
    }

    #[test]
    fn sentinel_bounds_hold(
        n_max in 1u32..4,
        t_max in 1.0..4.0f64,
        rho in 0.01..1.0f64,
        ops in prop::collection::vec((0u8..3, 0.0..20.0f64), 1..80),
    ) {
        let config = SentinelConfig { n_max, t_max, rho };
        let mut s = SentinelState::new(config, SimTime::ZERO).unwrap();
        let mut now = 0.0;
        for (op, dt) in ops {
            now += dt;
            let at = SimTime::from_secs_f64(now);
            match op {
                0 => {
                    s.refill(at).unwrap();
                    let tokens_before = s.tokens();
                    let active_before = s.n_active();
                    match s.admit(at) {
                        Decision::Admitted => prop_assert!(active_before < n_max && tokens_before >= 1.0 - 1e-9),
                        Decision::RejectedConcurrency => prop_assert_eq!(active_before, n_max),
                        Decision::RejectedRate => prop_assert!(tokens_before < 1.0 + 1e-9),
                    }
                }
                1 => { let _ = s.release(); }
                _ => s.refill(at).unwrap(),
            }
            prop_assert!(s.n_active() <= n_max);
            prop_assert!(s.tokens() >= 0.0 && s.tokens() <= t_max);
        }
        let t = s.tallies();
        prop_assert!(t.admitted >= u64::from(s.n_active()));
    }
}
