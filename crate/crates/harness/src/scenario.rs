//! Scenario files: one TOML document whose keys mirror [`ScenarioConfig`].

use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use lotls_core::frame_codec::{FrameError, RetryPolicy, L_MAX};
use lotls_core::lora_channel::{ChannelConfig, ChannelError};
use lotls_core::sentinel::{SentinelConfig, SentinelError};
use petgraph::algo::has_path_connecting;
use petgraph::graph::UnGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the hub node in topology links.
pub const HUB_NODE: &str = "eh";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("topology needs at least one device")]
    NoDevices,
    #[error("{listed} device addresses listed for {n_devices} devices")]
    AddressCount { listed: usize, n_devices: usize },
    #[error("link names unknown node {0:?}")]
    UnknownNode(String),
    #[error("device {0} has no path to the hub")]
    Unreachable(String),
    #[error("l_max must be in 1..=200, got {0}")]
    LMax(usize),
    #[error("{0} must be finite and non-negative")]
    NegativeDelay(&'static str),
    #[error("request count must be at least 1")]
    NoRequests,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Sentinel(#[from] SentinelError),
    #[error(transparent)]
    Retry(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TlsMode {
    /// Scripted record flights with seeded contents.
    #[default]
    #[serde(alias = "sim")]
    SimulatedTls,
    /// A TLS 1.3 client and server from rustls.
    #[serde(alias = "real")]
    RealTls,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub n_devices: usize,
    /// Device addresses; generated from 192.168.4.2 upward when empty.
    pub devices: Vec<Ipv4Addr>,
    /// Undirected links between `dev<i>` and `eh` nodes; a star when empty.
    pub links: Vec<(String, String)>,
}

impl Default for Topology {
    fn default() -> Self {
        Topology { n_devices: 1, devices: Vec::new(), links: Vec::new() }
    }
}

impl Topology {
    pub fn device_name(index: usize) -> String {
        format!("dev{index}")
    }

    pub fn device_addresses(&self) -> Vec<Ipv4Addr> {
        if !self.devices.is_empty() {
            return self.devices.clone();
        }
        (0..self.n_devices).map(|i| Ipv4Addr::from(u32::from(Ipv4Addr::new(192, 168, 4, 2)) + i as u32)).collect()
    }

    /// Every device must reach the hub over the listed links.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n_devices == 0 {
            return Err(ScenarioError::NoDevices);
        }
        if !self.devices.is_empty() && self.devices.len() != self.n_devices {
            return Err(ScenarioError::AddressCount { listed: self.devices.len(), n_devices: self.n_devices });
        }
        let mut graph = UnGraph::<String, ()>::new_undirected();
        let hub = graph.add_node(HUB_NODE.to_string());
        let devices: Vec<_> = (0..self.n_devices).map(|i| graph.add_node(Self::device_name(i))).collect();
        let lookup = |name: &str| {
            if name == HUB_NODE {
                return Some(hub);
            }
            let index: usize = name.strip_prefix("dev")?.parse().ok()?;
            devices.get(index).copied()
        };
        if self.links.is_empty() {
            for &d in &devices {
                graph.add_edge(d, hub, ());
            }
        } else {
            for (a, b) in &self.links {
                let na = lookup(a).ok_or_else(|| ScenarioError::UnknownNode(a.clone()))?;
                let nb = lookup(b).ok_or_else(|| ScenarioError::UnknownNode(b.clone()))?;
                graph.add_edge(na, nb, ());
            }
        }
        for (i, &d) in devices.iter().enumerate() {
            if !has_path_connecting(&graph, d, hub, None) {
                return Err(ScenarioError::Unreachable(Self::device_name(i)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub max_retries: u32,
    /// Seconds; derived from the channel and the processing delay when absent.
    pub ack_timeout: Option<f64>,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig { max_retries: 5, ack_timeout: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    Deterministic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrivalConfig {
    /// Clients per second.
    pub rate: f64,
    pub count: usize,
    pub process: ArrivalProcess,
}

impl Default for ArrivalConfig {
    fn default() -> Self {
        ArrivalConfig { rate: 0.05, count: 20, process: ArrivalProcess::Poisson }
    }
}

/// Session hold time for admission experiments: a clipped normal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldTimeModel {
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for HoldTimeModel {
    fn default() -> Self {
        HoldTimeModel { mean: 14.02, std_dev: 2.05, min: 8.0, max: 20.0 }
    }
}

pub const DEFAULT_BODY: &str = r#"{"id":7,"status":"ok","message":"hello over the link!"}"#;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestConfig {
    pub qname: String,
    pub path: String,
    /// Number of sequential requests.
    pub count: usize,
    /// Seconds between request starts.
    pub interval: f64,
    /// Response body the server returns.
    pub body: String,
    pub expected_body_bytes: usize,
}

impl Default for RequestConfig {
    fn default() -> Self {
        RequestConfig {
            qname: "api.test".into(),
            path: "/v1/status".into(),
            count: 1,
            interval: 20.0,
            body: DEFAULT_BODY.into(),
            expected_body_bytes: DEFAULT_BODY.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { ip: Ipv4Addr::new(203, 0, 113, 10), port: 443 }
    }
}

/// Record body sizes of the scripted handshake, in bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTlsConfig {
    pub client_hello: usize,
    pub server_hello: usize,
    /// Encrypted extensions, certificate chain, verify and finished.
    pub server_encrypted: usize,
    pub client_finished: usize,
    /// Bytes of response headers ahead of the body.
    pub response_headers: usize,
}

impl Default for SimTlsConfig {
    fn default() -> Self {
        SimTlsConfig {
            client_hello: 512,
            server_hello: 122,
            server_encrypted: 2400,
            client_finished: 53,
            response_headers: 96,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub mode: TlsMode,
    pub topology: Topology,
    pub channel: ChannelConfig,
    pub l_max: usize,
    pub retry: RetryConfig,
    pub sentinel: SentinelConfig,
    /// Seconds a node spends handling a frame at each end of a radio hop.
    pub processing_delay_per_hop: f64,
    /// One-way delay between the relay and the server, seconds.
    pub backbone_delay: f64,
    /// One-way delay between a device and the hub, seconds.
    pub lan_delay: f64,
    pub arrival: ArrivalConfig,
    pub hold_time: HoldTimeModel,
    pub request: RequestConfig,
    pub server: ServerConfig,
    pub sim_tls: SimTlsConfig,
    /// Reporting period for the duty-cycle estimate, seconds.
    pub duty_period: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            mode: TlsMode::default(),
            topology: Topology::default(),
            channel: ChannelConfig::default(),
            l_max: L_MAX,
            retry: RetryConfig::default(),
            sentinel: SentinelConfig::default(),
            processing_delay_per_hop: 0.12,
            backbone_delay: 0.01,
            lan_delay: 0.002,
            arrival: ArrivalConfig::default(),
            hold_time: HoldTimeModel::default(),
            request: RequestConfig::default(),
            server: ServerConfig::default(),
            sim_tls: SimTlsConfig::default(),
            duty_period: 1200.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.topology.validate()?;
        self.channel.validate()?;
        self.sentinel.validate()?;
        if self.l_max == 0 || self.l_max > L_MAX {
            return Err(ScenarioError::LMax(self.l_max));
        }
        for (name, value) in [
            ("processing_delay_per_hop", self.processing_delay_per_hop),
            ("backbone_delay", self.backbone_delay),
            ("lan_delay", self.lan_delay),
            ("request.interval", self.request.interval),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ScenarioError::NegativeDelay(name));
            }
        }
        if self.request.count == 0 {
            return Err(ScenarioError::NoRequests);
        }
        self.retry_policy()?;
        Ok(())
    }

    /// ARQ policy for both proxies. Without an explicit timeout, the channel
    /// default is padded for the handling time at four hop ends: the data
    /// frame's receiver, and the ACK's sender and receiver, plus one spare.
    pub fn retry_policy(&self) -> Result<RetryPolicy, ScenarioError> {
        let timeout = match self.retry.ack_timeout {
            Some(secs) if secs.is_finite() && secs > 0.0 => Duration::from_secs_f64(secs),
            Some(_) => return Err(FrameError::ZeroAckTimeout.into()),
            None => {
                RetryPolicy::default_ack_timeout(&self.channel)?
                    + Duration::from_secs_f64(4.0 * self.processing_delay_per_hop)
            }
        };
        Ok(RetryPolicy::new(self.retry.max_retries, timeout)?)
    }
}
