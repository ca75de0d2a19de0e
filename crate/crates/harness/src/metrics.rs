//! Per-request stage delays and the aggregate report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lotls_core::sentinel::SentinelTallies;

use crate::scenario::TlsMode;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    #[error("stage {0} has no measurement")]
    MissingStage(&'static str),
    #[error("no packets were sent")]
    NoPacketsSent,
    #[error("more packets delivered ({delivered}) than sent ({sent})")]
    DeliveredExceedsSent { sent: u64, delivered: u64 },
    #[error("duty-cycle period must be positive")]
    InvalidPeriod,
}

pub const STAGE_NAMES: [&str; 4] = ["dns", "tcp", "tls", "access"];

/// Stage latencies of one request, seconds. `None` marks a stage that did
/// not finish.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageDelays {
    pub dns: Option<f64>,
    pub tcp: Option<f64>,
    pub tls: Option<f64>,
    pub access: Option<f64>,
}

impl StageDelays {
    pub fn complete(dns: f64, tcp: f64, tls: f64, access: f64) -> Self {
        StageDelays { dns: Some(dns), tcp: Some(tcp), tls: Some(tls), access: Some(access) }
    }

    fn values(&self) -> [Option<f64>; 4] {
        [self.dns, self.tcp, self.tls, self.access]
    }
}

/// Sum of the four stages with each stage's share of it, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalDelay {
    pub total: f64,
    pub share_percent: [f64; 4],
}

pub fn compute_total_delay(stages: &StageDelays) -> Result<TotalDelay, MetricsError> {
    let mut values = [0.0; 4];
    for (slot, (value, name)) in values.iter_mut().zip(stages.values().into_iter().zip(STAGE_NAMES)) {
        *slot = value.ok_or(MetricsError::MissingStage(name))?;
    }
    let total = values[0] + values[1] + values[2] + values[3];
    let share_percent = values.map(|v| if total > 0.0 { v / total * 100.0 } else { 0.0 });
    Ok(TotalDelay { total, share_percent })
}

/// Delivered over sent, in percent.
pub fn compute_pdr(sent: u64, delivered: u64) -> Result<f64, MetricsError> {
    if sent == 0 {
        return Err(MetricsError::NoPacketsSent);
    }
    if delivered > sent {
        return Err(MetricsError::DeliveredExceedsSent { sent, delivered });
    }
    Ok(delivered as f64 / sent as f64 * 100.0)
}

/// Radio on-time per period as a percentage, with the spread that an
/// on-time deviation of `on_time_spread` seconds carries into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DutyCycleEstimate {
    pub on_time_s: f64,
    pub period_s: f64,
    pub percent: f64,
    pub spread_percent: f64,
}

pub fn duty_cycle_estimate(on_time: f64, on_time_spread: f64, period: f64) -> Result<DutyCycleEstimate, MetricsError> {
    if !(period > 0.0) {
        return Err(MetricsError::InvalidPeriod);
    }
    Ok(DutyCycleEstimate {
        on_time_s: on_time,
        period_s: period,
        percent: on_time / period * 100.0,
        spread_percent: on_time_spread / period * 100.0,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub index: usize,
    pub device: String,
    pub started_at: f64,
    pub stages: StageDelays,
    /// Sum of the stages; absent unless all four finished.
    pub total: Option<f64>,
    pub completed: bool,
    pub body_matches: bool,
    pub body_len: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: TlsMode,
    pub seed: u64,
    pub requests: Vec<RequestMetrics>,
    pub completed: usize,
    /// Means over completed requests.
    pub mean_stages: StageDelays,
    pub mean_total: f64,
    pub std_total: f64,
    pub stage_share_percent: [f64; 4],
    /// Messages handed to the radio link by either proxy.
    pub packets_sent: u64,
    /// Messages the peer proxy received complete.
    pub packets_delivered: u64,
    pub pdr_percent: f64,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub frame_delivery_ratio: f64,
    pub retransmissions: u64,
    /// TLS bytes relayed in both directions per second of TLS and access time.
    pub throughput_bytes_per_s: f64,
    pub airtime_total_s: f64,
    pub radio_duty_cycle_percent: f64,
    pub duty_cycle: DutyCycleEstimate,
    pub sentinel: SentinelTallies,
    pub processing_delay_per_hop: f64,
    pub simulated_time_s: f64,
}

impl MetricsReport {
    pub fn all_completed(&self) -> bool {
        self.completed == self.requests.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_requires_every_stage() {
        let stages = StageDelays { dns: Some(1.0), tcp: None, tls: Some(1.0), access: Some(1.0) };
        assert_eq!(compute_total_delay(&stages), Err(MetricsError::MissingStage("tcp")));
    }

    #[test]
    fn all_zero_stages_sum_to_zero() {
        let total = compute_total_delay(&StageDelays::complete(0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(total.total, 0.0);
        assert_eq!(total.share_percent, [0.0; 4]);
    }

    #[test]
    fn pdr_cases() {
        assert_eq!(compute_pdr(100, 100).unwrap(), 100.0);
        assert_eq!(compute_pdr(10, 8).unwrap(), 80.0);
        assert_eq!(compute_pdr(0, 0), Err(MetricsError::NoPacketsSent));
        assert!(compute_pdr(1, 2).is_err());
    }

    #[test]
    fn sample_std_dev() {
        assert!((std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.138_089_935).abs() < 1e-9);
        assert_eq!(std_dev(&[3.0]), 0.0);
    }
}
