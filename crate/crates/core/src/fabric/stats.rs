use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::Micros;
use crate::ids::NodeId;

/// Live counters for one directed link. All counters are atomic so sender
/// and receiver paths can update them concurrently.
#[derive(Debug)]
pub struct LinkStats {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    frames_lost: AtomicU64,
    frames_intercepted: AtomicU64,
    control_bytes: AtomicU64,
    latency_sum_us: AtomicU64,
    first_sent_us: AtomicU64,
    last_arrival_us: AtomicU64,
    latency_samples: Mutex<Vec<Micros>>,
}

impl Default for LinkStats {
    fn default() -> Self {
        LinkStats {
            bytes_sent: AtomicU64::new(0),
            bytes_received: AtomicU64::new(0),
            frames_sent: AtomicU64::new(0),
            frames_received: AtomicU64::new(0),
            frames_lost: AtomicU64::new(0),
            frames_intercepted: AtomicU64::new(0),
            control_bytes: AtomicU64::new(0),
            latency_sum_us: AtomicU64::new(0),
            first_sent_us: AtomicU64::new(u64::MAX),
            last_arrival_us: AtomicU64::new(0),
            latency_samples: Mutex::new(Vec::new()),
        }
    }
}

impl LinkStats {
    pub fn record_sent(&self, wire_len: usize, control: bool, at: Micros) {
        self.bytes_sent.fetch_add(wire_len as u64, Relaxed);
        self.frames_sent.fetch_add(1, Relaxed);
        if control {
            self.control_bytes.fetch_add(wire_len as u64, Relaxed);
        }
        self.first_sent_us.fetch_min(at, Relaxed);
    }

    pub fn record_received(&self, wire_len: usize, latency: Micros, arrived: Micros) {
        self.bytes_received.fetch_add(wire_len as u64, Relaxed);
        self.frames_received.fetch_add(1, Relaxed);
        self.latency_sum_us.fetch_add(latency, Relaxed);
        self.last_arrival_us.fetch_max(arrived, Relaxed);
        self.latency_samples.lock().push(latency);
    }

    pub fn record_lost(&self) {
        self.frames_lost.fetch_add(1, Relaxed);
    }

    pub fn record_intercepted(&self) {
        self.frames_intercepted.fetch_add(1, Relaxed);
    }

    pub fn latency_samples(&self) -> Vec<Micros> {
        self.latency_samples.lock().clone()
    }

    pub fn snapshot(&self) -> LinkCounters {
        let first = self.first_sent_us.load(Relaxed);
        LinkCounters {
            bytes_sent: self.bytes_sent.load(Relaxed),
            bytes_received: self.bytes_received.load(Relaxed),
            frames_sent: self.frames_sent.load(Relaxed),
            frames_received: self.frames_received.load(Relaxed),
            frames_lost: self.frames_lost.load(Relaxed),
            frames_intercepted: self.frames_intercepted.load(Relaxed),
            control_bytes: self.control_bytes.load(Relaxed),
            latency_sum_us: self.latency_sum_us.load(Relaxed),
            first_sent_us: (first != u64::MAX).then_some(first),
            last_arrival_us: self.last_arrival_us.load(Relaxed),
        }
    }
}

/// Plain copy of a link's counters with the derived metrics on top.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub frames_lost: u64,
    pub frames_intercepted: u64,
    pub control_bytes: u64,
    pub latency_sum_us: u64,
    pub first_sent_us: Option<Micros>,
    pub last_arrival_us: Micros,
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64 * 100.0
    }
}

impl LinkCounters {
    pub fn merge(&mut self, other: &LinkCounters) {
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.frames_sent += other.frames_sent;
        self.frames_received += other.frames_received;
        self.frames_lost += other.frames_lost;
        self.frames_intercepted += other.frames_intercepted;
        self.control_bytes += other.control_bytes;
        self.latency_sum_us += other.latency_sum_us;
        self.first_sent_us = match (self.first_sent_us, other.first_sent_us) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.last_arrival_us = self.last_arrival_us.max(other.last_arrival_us);
    }

    /// Difference against an earlier snapshot of the same counters.
    pub fn since(&self, earlier: &LinkCounters) -> LinkCounters {
        LinkCounters {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            frames_sent: self.frames_sent - earlier.frames_sent,
            frames_received: self.frames_received - earlier.frames_received,
            frames_lost: self.frames_lost - earlier.frames_lost,
            frames_intercepted: self.frames_intercepted - earlier.frames_intercepted,
            control_bytes: self.control_bytes - earlier.control_bytes,
            latency_sum_us: self.latency_sum_us - earlier.latency_sum_us,
            first_sent_us: self.first_sent_us,
            last_arrival_us: self.last_arrival_us,
        }
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.frames_received == 0 {
            0.0
        } else {
            self.latency_sum_us as f64 / self.frames_received as f64 / 1000.0
        }
    }

    /// `frames_lost / frames_sent × 100`.
    pub fn loss_pct(&self) -> f64 {
        pct(self.frames_lost, self.frames_sent)
    }

    /// `control_bytes / bytes_sent × 100`.
    pub fn ctrl_overhead_pct(&self) -> f64 {
        pct(self.control_bytes, self.bytes_sent)
    }

    /// Delivered bits per second over the link's active window, in Mbps.
    pub fn throughput_mbps(&self) -> f64 {
        match self.first_sent_us {
            Some(first) if self.last_arrival_us > first => {
                self.bytes_received as f64 * 8.0 / (self.last_arrival_us - first) as f64
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSnapshot {
    pub src: NodeId,
    pub dst: NodeId,
    pub counters: LinkCounters,
    pub throughput_mbps: f64,
    pub mean_latency_ms: f64,
    pub loss_pct: f64,
    pub ctrl_overhead_pct: f64,
}

impl LinkSnapshot {
    pub fn new(src: NodeId, dst: NodeId, counters: LinkCounters) -> Self {
        LinkSnapshot {
            src,
            dst,
            counters,
            throughput_mbps: counters.throughput_mbps(),
            mean_latency_ms: counters.mean_latency_ms(),
            loss_pct: counters.loss_pct(),
            ctrl_overhead_pct: counters.ctrl_overhead_pct(),
        }
    }
}

/// Per-link snapshot plus fabric-wide totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub links: Vec<LinkSnapshot>,
    pub totals: LinkCounters,
    pub routing_errors: u64,
}

impl StatsSnapshot {
    pub fn from_counters(
        links: BTreeMap<(NodeId, NodeId), LinkCounters>,
        routing_errors: u64,
    ) -> Self {
        let mut totals = LinkCounters::default();
        let links = links
            .into_iter()
            .map(|((s, d), c)| {
                totals.merge(&c);
                LinkSnapshot::new(s, d, c)
            })
            .collect();
        StatsSnapshot {
            links,
            totals,
            routing_errors,
        }
    }

    /// Sums snapshots taken in different processes. Each counter is only
    /// ever incremented on one side of a link, so addition is exact.
    pub fn merge_all<'a>(parts: impl IntoIterator<Item = &'a StatsSnapshot>) -> StatsSnapshot {
        let mut links: BTreeMap<(NodeId, NodeId), LinkCounters> = BTreeMap::new();
        let mut routing_errors = 0;
        for part in parts {
            routing_errors += part.routing_errors;
            for l in &part.links {
                links.entry((l.src, l.dst)).or_default().merge(&l.counters);
            }
        }
        Self::from_counters(links, routing_errors)
    }

    pub fn link(&self, src: NodeId, dst: NodeId) -> Option<&LinkSnapshot> {
        self.links.iter().find(|l| l.src == src && l.dst == dst)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "link",
            "src",
            "dst",
            "bytes_sent",
            "bytes_recv",
            "frames_lost",
            "mean_latency_ms",
            "control_bytes",
        ])?;
        for l in &self.links {
            out.write_record([
                format!("{}->{}", l.src, l.dst),
                l.src.to_string(),
                l.dst.to_string(),
                l.counters.bytes_sent.to_string(),
                l.counters.bytes_received.to_string(),
                l.counters.frames_lost.to_string(),
                format!("{:.6}", l.mean_latency_ms),
                l.counters.control_bytes.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Shared registry of every link seen by one fabric instance.
#[derive(Debug, Default)]
pub struct StatsRegistry {
    links: RwLock<BTreeMap<(NodeId, NodeId), Arc<LinkStats>>>,
    routing_errors: RwLock<BTreeMap<NodeId, u64>>,
}

impl StatsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn link(&self, src: NodeId, dst: NodeId) -> Arc<LinkStats> {
        if let Some(l) = self.links.read().get(&(src, dst)) {
            return l.clone();
        }
        self.links.write().entry((src, dst)).or_default().clone()
    }

    pub fn record_routing_error(&self, src: NodeId) {
        *self.routing_errors.write().entry(src).or_default() += 1;
    }

    pub fn routing_errors(&self, src: NodeId) -> u64 {
        self.routing_errors.read().get(&src).copied().unwrap_or(0)
    }

    pub fn total_routing_errors(&self) -> u64 {
        self.routing_errors.read().values().sum()
    }

    /// Sent-side counters of `node`'s outbound links merged with the
    /// receive-side counters of its inbound links.
    pub fn node_totals(&self, node: NodeId) -> NodeTotals {
        let mut t = NodeTotals::default();
        for (&(s, d), l) in self.links.read().iter() {
            let c = l.snapshot();
            if s == node {
                t.bytes_sent += c.bytes_sent;
                t.frames_sent += c.frames_sent;
                t.frames_lost += c.frames_lost;
                t.control_bytes += c.control_bytes;
            }
            if d == node {
                t.bytes_received += c.bytes_received;
                t.frames_received += c.frames_received;
                t.latency_sum_us += c.latency_sum_us;
            }
        }
        t
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let links = self
            .links
            .read()
            .iter()
            .map(|(&k, l)| (k, l.snapshot()))
            .collect();
        StatsSnapshot::from_counters(links, self.total_routing_errors())
    }
}

/// Running totals for one endpoint, used for per-round deltas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTotals {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub frames_lost: u64,
    pub control_bytes: u64,
    pub latency_sum_us: u64,
}

impl NodeTotals {
    pub fn since(&self, earlier: &NodeTotals) -> NodeTotals {
        NodeTotals {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            frames_sent: self.frames_sent - earlier.frames_sent,
            frames_received: self.frames_received - earlier.frames_received,
            frames_lost: self.frames_lost - earlier.frames_lost,
            control_bytes: self.control_bytes - earlier.control_bytes,
            latency_sum_us: self.latency_sum_us - earlier.latency_sum_us,
        }
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.frames_received == 0 {
            0.0
        } else {
            self.latency_sum_us as f64 / self.frames_received as f64 / 1000.0
        }
    }

    pub fn loss_pct(&self) -> f64 {
        pct(self.frames_lost, self.frames_sent)
    }

    pub fn ctrl_overhead_pct(&self) -> f64 {
        pct(self.control_bytes, self.bytes_sent)
    }
}

/// `F_ij = |m_ij| / Σ |m_ij|` over the given message stream.
pub fn communication_frequency(
    messages: impl IntoIterator<Item = (NodeId, NodeId)>,
) -> BTreeMap<(NodeId, NodeId), f64> {
    let mut counts: BTreeMap<(NodeId, NodeId), u64> = BTreeMap::new();
    let mut total = 0u64;
    for pair in messages {
        *counts.entry(pair).or_default() += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total as f64))
        .collect()
}
