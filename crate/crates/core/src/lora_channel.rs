//! Simulated LoRa link between the End Hub and the Net Relay.
//!
//! The channel is a single shared medium. A transmission occupies it for the
//! frame's airtime; a second transmission attempted while it is occupied is
//! refused with [`TransmitOutcome::ChannelBusy`]. Loss is an i.i.d. Bernoulli
//! trial per frame drawn from a seeded generator, and jamming is a set of
//! fixed time windows. Every transmission that actually went on air is
//! recorded in the [`AirtimeLedger`].

use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

/// Largest PHY payload the airtime model accepts.
pub const MAX_PHY_PAYLOAD: usize = 255;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("frame length {0} outside 1..=255")]
    InvalidLength(usize),
    #[error("duty-cycle window must be positive")]
    EmptyWindow,
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),
}

/// Who put a frame on air.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeId {
    #[serde(rename = "EH")]
    EndHub,
    #[serde(rename = "NR")]
    NetRelay,
}

impl NodeId {
    pub fn peer(self) -> NodeId {
        match self {
            NodeId::EndHub => NodeId::NetRelay,
            NodeId::NetRelay => NodeId::EndHub,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeId::EndHub => "EH",
            NodeId::NetRelay => "NR",
        })
    }
}

/// Radio and impairment parameters. Durations are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub spreading_factor: u8,
    pub bandwidth_hz: u32,
    /// Coding rate index; the code rate is 4/(4 + coding_rate).
    pub coding_rate: u8,
    pub preamble_symbols: u16,
    pub explicit_header: bool,
    pub low_data_rate_optimize: bool,
    pub loss_probability: f64,
    pub jam_windows: Vec<(f64, f64)>,
    pub propagation_delay: f64,
    pub rng_seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            spreading_factor: 7,
            bandwidth_hz: 500_000,
            coding_rate: 1,
            preamble_symbols: 8,
            explicit_header: true,
            low_data_rate_optimize: false,
            loss_probability: 0.0,
            jam_windows: Vec::new(),
            propagation_delay: 0.0,
            rng_seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |msg: String| Err(ChannelError::InvalidConfig(msg));
        if !(7..=12).contains(&self.spreading_factor) {
            return bad(format!("spreading_factor {} not in 7..=12", self.spreading_factor));
        }
        if ![125_000, 250_000, 500_000].contains(&self.bandwidth_hz) {
            return bad(format!("bandwidth_hz {} not one of 125k/250k/500k", self.bandwidth_hz));
        }
        if !(1..=4).contains(&self.coding_rate) {
            return bad(format!("coding_rate {} not in 1..=4", self.coding_rate));
        }
        if !(0.0..1.0).contains(&self.loss_probability) {
            return bad(format!("loss_probability {} not in [0, 1)", self.loss_probability));
        }
        if !(self.propagation_delay >= 0.0) {
            return bad("propagation_delay must be non-negative".into());
        }
        let mut windows = self.jam_windows.clone();
        windows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in &windows {
            if !(w.0 < w.1) {
                return bad(format!("jam window {w:?} is empty"));
            }
        }
        for pair in windows.windows(2) {
            if pair[1].0 < pair[0].1 {
                return bad(format!("jam windows {:?} and {:?} overlap", pair[0], pair[1]));
            }
        }
        Ok(())
    }

    /// Symbol duration in seconds.
    pub fn symbol_time(&self) -> f64 {
        f64::from(1u32 << self.spreading_factor) / f64::from(self.bandwidth_hz)
    }
}

/// Time on air, in seconds, of a PHY payload of `frame_len` bytes.
///
/// Semtech's explicit-header formula with the payload CRC enabled:
/// `(n_preamble + 4.25 + 8 + max(0, ceil((8PL - 4SF + 28 + 16 - 20IH) / (4(SF - 2DE)))) * (CR + 4)) * 2^SF / BW`.
pub fn airtime(frame_len: usize, config: &ChannelConfig) -> Result<f64, ChannelError> {
    if !(1..=MAX_PHY_PAYLOAD).contains(&frame_len) {
        return Err(ChannelError::InvalidLength(frame_len));
    }
    let sf = i64::from(config.spreading_factor);
    let ih = i64::from(!config.explicit_header);
    let de = i64::from(config.low_data_rate_optimize);
    let numerator = 8 * frame_len as i64 - 4 * sf + 28 + 16 - 20 * ih;
    let denominator = 4 * (sf - 2 * de);
    // ceil for a positive denominator
    let blocks = if numerator > 0 { (numerator + denominator - 1) / denominator } else { 0 };
    let payload_symbols = 8 + blocks * (i64::from(config.coding_rate) + 4);
    let symbols = f64::from(config.preamble_symbols) + 4.25 + payload_symbols as f64;
    Ok(symbols * f64::from(1u32 << config.spreading_factor) / f64::from(config.bandwidth_hz))
}

/// Result of asking the channel to carry a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransmitOutcome {
    /// Frame is on air and reaches the peer at the given time.
    Scheduled(SimTime),
    /// The medium is occupied; nothing was sent.
    ChannelBusy,
    /// Frame went on air but was lost.
    Lost,
    /// Frame went on air during a jam window.
    Jammed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub t: f64,
    pub sender: NodeId,
    pub bytes: usize,
    pub airtime_s: f64,
}

/// Chronological record of every transmission that occupied the channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AirtimeLedger {
    entries: Vec<LedgerEntry>,
}

impl AirtimeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; entries must arrive in chronological order.
    pub fn record(&mut self, entry: LedgerEntry) {
        debug_assert!(self.entries.last().is_none_or(|last| last.t <= entry.t));
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_airtime(&self, sender: Option<NodeId>) -> f64 {
        self.entries.iter().filter(|e| sender.is_none_or(|s| s == e.sender)).map(|e| e.airtime_s).sum()
    }

    /// One JSON object per line: `{t, sender, bytes, airtime_s}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Percentage of `[0, window_s)` during which `sender` was on air.
pub fn duty_cycle(ledger: &AirtimeLedger, window_s: f64, sender: NodeId) -> Result<f64, ChannelError> {
    if !(window_s > 0.0) {
        return Err(ChannelError::EmptyWindow);
    }
    let on_time: f64 = ledger
        .entries()
        .iter()
        .filter(|e| e.sender == sender)
        .map(|e| {
            let start = e.t.max(0.0);
            let end = (e.t + e.airtime_s).min(window_s);
            (end - start).max(0.0)
        })
        .sum();
    Ok(100.0 * on_time / window_s)
}

/// The shared half-duplex medium.
#[derive(Debug, Clone)]
pub struct LoraChannel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    busy_until: SimTime,
    ledger: AirtimeLedger,
}

impl LoraChannel {
    pub fn new(config: ChannelConfig) -> Result<Self, ChannelError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(LoraChannel { config, rng, busy_until: SimTime::ZERO, ledger: AirtimeLedger::new() })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn ledger(&self) -> &AirtimeLedger {
        &self.ledger
    }

    /// End of the current occupancy; the channel is idle from this instant on.
    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    pub fn is_idle(&self, now: SimTime) -> bool {
        now >= self.busy_until
    }

    pub fn airtime(&self, frame_len: usize) -> Result<f64, ChannelError> {
        airtime(frame_len, &self.config)
    }

    pub fn transmit(&mut self, frame: &[u8], sender: NodeId, now: SimTime) -> Result<TransmitOutcome, ChannelError> {
        let air = self.airtime(frame.len())?;
        if !self.is_idle(now) {
            return Ok(TransmitOutcome::ChannelBusy);
        }
        let start = now.as_secs_f64();
        let end_time = SimTime::from_nanos(now.as_nanos() + (air * 1e9).round() as u64);
        self.busy_until = end_time;
        self.ledger.record(LedgerEntry { t: start, sender, bytes: frame.len(), airtime_s: air });

        let end = start + air;
        if self.config.jam_windows.iter().any(|&(js, je)| start < je && js < end) {
            return Ok(TransmitOutcome::Jammed);
        }
        if self.config.loss_probability > 0.0 && self.rng.random_bool(self.config.loss_probability) {
            return Ok(TransmitOutcome::Lost);
        }
        let prop = SimTime::from_secs_f64(self.config.propagation_delay).as_nanos();
        Ok(TransmitOutcome::Scheduled(SimTime::from_nanos(end_time.as_nanos() + prop)))
    }
}
