//! Simulation harness for the LoRa TLS tunnel.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod device;
pub mod metrics;
pub mod report;
pub mod scenario;
pub mod sentinel_exp;
pub mod server;
pub mod sim;
pub mod tls;
