//! Protocol library for carrying HTTPS sessions across a half-duplex LoRa
//! backhaul.
//!
//! Two proxies cooperate over the radio link. The [`end_hub`] sits next to
//! the end devices, sniffs their DNS/TCP/TLS traffic and relays it; the
//! [`net_relay`] sits next to the Internet uplink and rebuilds the TCP
//! handshake toward the real server. TLS is never terminated: only
//! ciphertext crosses the link.
//!
//! Lower layers:
//!
//! * [`frame_codec`]: chunking, the LoRa wire frame, and stop-and-wait ARQ.
//! * [`lora_channel`]: airtime model and a seeded, half-duplex channel.
//! * [`packet_engine`]: IPv4/TCP/UDP/DNS parsing and rewriting, TLS record
//!   framing.
//! * [`sentinel`]: admission control for new sessions.
//! * [`endpoint`]: the reliable message pipe each proxy runs on its radio.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod end_hub;
pub mod endpoint;
pub mod frame_codec;
pub mod link;
pub mod lora_channel;
pub mod net_relay;
pub mod packet_engine;
pub mod sentinel;
pub mod time;

pub use time::SimTime;
