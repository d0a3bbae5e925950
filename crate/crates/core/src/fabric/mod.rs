//! Framed peer-to-peer transport with a deterministic simulated backend and
//! a TCP backend, plus per-link telemetry.

mod address;
mod frame;
pub mod sim;
mod stats;
pub mod tcp;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use address::{AddressPool, PeerAddress, MIN_PORT};
pub use frame::{
    Frame, FrameKind, DEFAULT_MAX_FRAME, FRAME_HEADER_LEN, FRAME_MAGIC, FRAME_VERSION,
};
pub use sim::{FrameLogEntry, FrameOutcome, SimEndpoint, SimFabric};
pub use stats::{
    communication_frequency, LinkCounters, LinkSnapshot, LinkStats, NodeTotals, StatsRegistry,
    StatsSnapshot,
};
pub use tcp::{TcpEndpoint, TcpFabric};

use crate::ids::NodeId;

/// Fabric time in microseconds. Virtual in the simulator, wall clock on TCP.
pub type Micros = u64;

pub fn ms_to_micros(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}

pub fn micros_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("address {0} is already in use")]
    AddressInUse(PeerAddress),
    #[error("no endpoint bound at {0}")]
    Unroutable(PeerAddress),
    #[error("address {0} is not bound by this endpoint")]
    NotBound(PeerAddress),
    #[error("frame body of {len} bytes exceeds the {max}-byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("endpoint closed")]
    Closed,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("invalid fabric configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sim,
    Tcp,
}

impl std::str::FromStr for Backend {
    type Err = FabricError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sim" | "simulated" => Ok(Backend::Sim),
            "tcp" => Ok(Backend::Tcp),
            other => Err(FabricError::Config(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricConfig {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default = "default_latency")]
    pub latency_mean_ms: f64,
    /// Standard deviation of the latency; defaults to 20% of the mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_jitter_ms: Option<f64>,
    #[serde(default)]
    pub loss_rate: f64,
    #[serde(default = "default_max_frame")]
    pub max_frame: usize,
    /// Sender uplink capacity; 0 disables serialization delay.
    #[serde(default = "default_bandwidth")]
    pub bandwidth_mbps: f64,
    /// Overrides the scenario seed for fabric randomness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_latency() -> f64 {
    5.0
}
fn default_max_frame() -> usize {
    DEFAULT_MAX_FRAME
}
fn default_bandwidth() -> f64 {
    100.0
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            backend: Backend::Sim,
            latency_mean_ms: default_latency(),
            latency_jitter_ms: None,
            loss_rate: 0.0,
            max_frame: DEFAULT_MAX_FRAME,
            bandwidth_mbps: default_bandwidth(),
            seed: None,
        }
    }
}

impl FabricConfig {
    pub fn validate(&self) -> Result<(), FabricError> {
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(FabricError::Config(format!(
                "loss_rate must lie in [0, 1), got {}",
                self.loss_rate
            )));
        }
        if !(self.latency_mean_ms.is_finite() && self.latency_mean_ms >= 0.0) {
            return Err(FabricError::Config("latency_mean_ms must be >= 0".into()));
        }
        if let Some(j) = self.latency_jitter_ms {
            if !(j.is_finite() && j >= 0.0) {
                return Err(FabricError::Config("latency_jitter_ms must be >= 0".into()));
            }
        }
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps >= 0.0) {
            return Err(FabricError::Config("bandwidth_mbps must be >= 0".into()));
        }
        if self.max_frame == 0 {
            return Err(FabricError::Config("max_frame must be positive".into()));
        }
        Ok(())
    }

    pub fn latency(&self) -> LatencyModel {
        LatencyModel {
            mean_ms: self.latency_mean_ms,
            jitter_ms: self
                .latency_jitter_ms
                .unwrap_or(0.2 * self.latency_mean_ms),
        }
    }
}

/// Normal latency truncated to `mean ± 3·jitter` (and at least zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

impl LatencyModel {
    pub fn upper_bound_ms(&self) -> f64 {
        self.mean_ms + 3.0 * self.jitter_ms
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Micros {
        let lo = (self.mean_ms - 3.0 * self.jitter_ms).max(0.0);
        let hi = self.upper_bound_ms();
        let ms = if self.jitter_ms > 0.0 {
            let normal = Normal::new(self.mean_ms, self.jitter_ms).expect("jitter > 0");
            normal.sample(rng).clamp(lo, hi)
        } else {
            self.mean_ms
        };
        ms_to_micros(ms)
    }
}

/// A frame handed to its receiver, with fabric-level metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub frame: Frame,
    pub src_node: NodeId,
    pub src_addr: Option<PeerAddress>,
    pub dst_addr: PeerAddress,
    pub sent_at: Micros,
    pub arrived_at: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendReceipt {
    /// Scheduled for arrival at the given fabric time.
    Delivered { arrival: Micros },
    /// Dropped by the simulated channel.
    Lost,
    /// Written to a socket; arrival time unknown to the sender.
    Sent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Received {
    Frame(Delivery),
    Timeout,
}

/// One node's attachment to the fabric. Implemented by both backends.
pub trait Transport: Send + Sync {
    fn node_id(&self) -> NodeId;
    fn now(&self) -> Micros;
    /// Addresses bound by this endpoint, oldest first.
    fn bound_addresses(&self) -> Vec<PeerAddress>;
    fn bind(&self, addr: PeerAddress) -> Result<(), FabricError>;
    fn release(&self, addr: PeerAddress) -> Result<(), FabricError>;
    fn send_frame(&self, to: PeerAddress, frame: &Frame) -> Result<SendReceipt, FabricError>;
    /// Next queued frame, or `Timeout` once `timeout` has elapsed.
    fn recv_frame(&self, timeout: Micros) -> Result<Received, FabricError>;
    fn stats(&self) -> Arc<StatsRegistry>;
    fn close(&self);

    fn primary_address(&self) -> Option<PeerAddress> {
        self.bound_addresses().last().copied()
    }

    /// True when time only moves as events are processed, so modelled
    /// compute cost has to be charged explicitly.
    fn virtual_time(&self) -> bool {
        false
    }
}

/// View of a frame on the delivery path, offered to interceptors.
#[derive(Debug)]
pub struct FrameView<'a> {
    pub sent_at: Micros,
    pub src_node: NodeId,
    pub src_addr: Option<PeerAddress>,
    pub dst_addr: PeerAddress,
    pub dst_node: NodeId,
    pub frame: &'a Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Drop,
    Redirect(PeerAddress),
}

/// Hook on the simulated delivery path. Runs inside the router and must
/// not block or call back into the fabric.
pub trait Interceptor: Send + Sync {
    fn inspect(&self, view: &FrameView<'_>) -> Verdict;
}
