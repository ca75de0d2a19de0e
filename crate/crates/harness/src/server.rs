//! Virtual web server: a minimal TCP responder in front of a TLS server end.

use std::collections::HashMap;
use std::net::SocketAddrV4;

use lotls_core::packet_engine::{parse_packet, PacketView, TcpFlags, TcpHeader, TcpOption};
use lotls_core::SimTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tls::{TlsFactory, TlsServerEnd};

const MSS: usize = 1460;

struct ServerConn {
    isn: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    tsval: Option<u32>,
    syn_tsval: Option<u32>,
    tls: Box<dyn TlsServerEnd>,
    fin_sent: bool,
}

pub struct WebServer {
    addr: SocketAddrV4,
    tls: TlsFactory,
    rng: ChaCha8Rng,
    clock_offset: u32,
    conns: HashMap<SocketAddrV4, ServerConn>,
    /// TLS failures, with the peer they came from.
    pub errors: Vec<(SocketAddrV4, String)>,
    pub connections_accepted: usize,
}

impl WebServer {
    pub fn new(addr: SocketAddrV4, tls: TlsFactory, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clock_offset = rng.random();
        WebServer { addr, tls, rng, clock_offset, conns: HashMap::new(), errors: Vec::new(), connections_accepted: 0 }
    }

    pub fn addr(&self) -> SocketAddrV4 {
        self.addr
    }

    fn segment(&self, peer: SocketAddrV4, header: TcpHeader, payload: Vec<u8>) -> Option<Vec<u8>> {
        PacketView::new_tcp(self.addr, peer, header, payload).ok().map(|p| p.raw)
    }

    pub fn on_packet(&mut self, bytes: &[u8], now: SimTime) -> Vec<Vec<u8>> {
        let Ok(packet) = parse_packet(bytes) else { return Vec::new() };
        let Some(header) = packet.tcp().cloned() else { return Vec::new() };
        if packet.dst() != self.addr {
            return Vec::new();
        }
        let peer = packet.src();
        if header.flags.contains(TcpFlags::RST) {
            self.conns.remove(&peer);
            return Vec::new();
        }
        if header.flags.contains(TcpFlags::SYN) && !header.flags.contains(TcpFlags::ACK) {
            return self.on_syn(peer, &header, now);
        }
        let Some(conn) = self.conns.get_mut(&peer) else { return Vec::new() };
        let mut replies = Vec::new();
        if !packet.payload.is_empty() && header.seq == conn.rcv_nxt {
            conn.rcv_nxt = conn.rcv_nxt.wrapping_add(packet.payload.len() as u32);
            match conn.tls.on_bytes(&packet.payload) {
                Ok(out) => replies = out,
                Err(e) => {
                    let rst = TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::RST | TcpFlags::ACK);
                    self.conns.remove(&peer);
                    self.errors.push((peer, e.to_string()));
                    return self.segment(peer, rst, Vec::new()).into_iter().collect();
                }
            }
        }
        let peer_fin = header.flags.contains(TcpFlags::FIN);
        if peer_fin {
            conn.rcv_nxt = conn.rcv_nxt.wrapping_add(1);
        }
        let mut headers = Vec::new();
        for piece in replies.chunks(MSS) {
            headers.push((TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::PSH | TcpFlags::ACK), piece.to_vec()));
            conn.snd_nxt = conn.snd_nxt.wrapping_add(piece.len() as u32);
        }
        if (conn.tls.finished() || peer_fin) && !conn.fin_sent {
            conn.fin_sent = true;
            headers.push((TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::FIN | TcpFlags::ACK), Vec::new()));
            conn.snd_nxt = conn.snd_nxt.wrapping_add(1);
        } else if peer_fin {
            headers.push((TcpHeader::new(conn.snd_nxt, conn.rcv_nxt, TcpFlags::ACK), Vec::new()));
        }
        if peer_fin {
            self.conns.remove(&peer);
        }
        headers.into_iter().filter_map(|(h, p)| self.segment(peer, h, p)).collect()
    }

    fn on_syn(&mut self, peer: SocketAddrV4, syn: &TcpHeader, now: SimTime) -> Vec<Vec<u8>> {
        let syn_tsval = syn.timestamp().map(|(tsval, _)| tsval);
        let fresh = self.conns.get(&peer).is_none_or(|c| c.rcv_nxt != syn.seq.wrapping_add(1));
        if fresh {
            let tls = match self.tls.server(syn.seq) {
                Ok(t) => t,
                Err(e) => {
                    self.errors.push((peer, e.to_string()));
                    return Vec::new();
                }
            };
            let isn: u32 = self.rng.random();
            let tsval = syn_tsval.map(|_| (now.as_millis() as u32).wrapping_add(self.clock_offset));
            self.connections_accepted += 1;
            self.conns.insert(
                peer,
                ServerConn {
                    isn,
                    snd_nxt: isn.wrapping_add(1),
                    rcv_nxt: syn.seq.wrapping_add(1),
                    tsval,
                    syn_tsval,
                    tls,
                    fin_sent: false,
                },
            );
        }
        let conn = &self.conns[&peer];
        let mut header = TcpHeader::new(conn.isn, conn.rcv_nxt, TcpFlags::SYN | TcpFlags::ACK);
        header.options = vec![TcpOption::mss(MSS as u16), TcpOption::sack_permitted()];
        if let (Some(tsval), Some(echo)) = (conn.tsval, conn.syn_tsval) {
            header.options.push(TcpOption::timestamp(tsval, echo));
        }
        header.options.extend([TcpOption::nop(), TcpOption::window_scale(7)]);
        self.segment(peer, header, Vec::new()).into_iter().collect()
    }
}
