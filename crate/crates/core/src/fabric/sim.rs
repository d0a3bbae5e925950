//! Deterministic discrete-event fabric.
//!
//! Every endpoint keeps a virtual clock. A send departs at the sender's
//! clock (after uplink serialization), arrives after a latency drawn from the
//! link's own seeded generator, and is queued in the receiver's inbox ordered
//! by `(arrival, sender, sequence)`. Arrivals on one link never overtake each
//! other. The driver advances clocks by popping the earliest arrival.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Delivery, FabricConfig, FabricError, Frame, FrameKind, FrameView, Interceptor, LatencyModel,
    Micros, PeerAddress, Received, SendReceipt, StatsRegistry, Transport, Verdict,
};
use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOutcome {
    Delivered,
    Lost,
    Dropped,
    Redirected,
    Unroutable,
}

/// One line of the frame log. Bodies are not retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLogEntry {
    pub seq: u64,
    pub sent_at: Micros,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival: Option<Micros>,
    pub src: NodeId,
    /// Endpoint that received the frame (differs from the addressee on redirect).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dst: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub addressee: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src_addr: Option<PeerAddress>,
    pub dst_addr: PeerAddress,
    pub kind: FrameKind,
    pub correlation_id: u32,
    pub wire_len: usize,
    pub outcome: FrameOutcome,
}

type InboxKey = (Micros, NodeId, u64);

struct EndpointState {
    node: NodeId,
    addrs: Vec<PeerAddress>,
    clock: Micros,
    uplink_free: Micros,
    inbox: BTreeMap<InboxKey, Delivery>,
    closed: bool,
}

struct LinkState {
    rng: ChaCha8Rng,
    last_arrival: Micros,
}

struct Router {
    endpoints: Vec<EndpointState>,
    by_node: HashMap<NodeId, usize>,
    bindings: HashMap<PeerAddress, usize>,
    links: HashMap<(NodeId, NodeId), LinkState>,
    seq: u64,
    log: Vec<FrameLogEntry>,
}

struct Shared {
    cfg: FabricConfig,
    seed: u64,
    latency: LatencyModel,
    router: Mutex<Router>,
    stats: Arc<StatsRegistry>,
    interceptors: RwLock<Vec<Arc<dyn Interceptor>>>,
}

/// Handle to a simulated fabric; cheap to clone.
#[derive(Clone)]
pub struct SimFabric {
    shared: Arc<Shared>,
}

fn link_seed(seed: u64, src: NodeId, dst: NodeId) -> u64 {
    // splitmix-style mixing keeps nearby ids far apart
    let mut z = seed ^ ((src.0 as u64) << 32 | dst.0 as u64);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimFabric {
    pub fn new(cfg: FabricConfig, seed: u64) -> Result<Self, FabricError> {
        cfg.validate()?;
        Ok(SimFabric {
            shared: Arc::new(Shared {
                latency: cfg.latency(),
                seed: cfg.seed.unwrap_or(seed),
                cfg,
                router: Mutex::new(Router {
                    endpoints: Vec::new(),
                    by_node: HashMap::new(),
                    bindings: HashMap::new(),
                    links: HashMap::new(),
                    seq: 0,
                    log: Vec::new(),
                }),
                stats: Arc::new(StatsRegistry::new()),
                interceptors: RwLock::new(Vec::new()),
            }),
        })
    }

    pub fn config(&self) -> &FabricConfig {
        &self.shared.cfg
    }

    /// Creates the endpoint for `node`. Each node id may attach once.
    pub fn endpoint(&self, node: NodeId) -> Result<SimEndpoint, FabricError> {
        let mut r = self.shared.router.lock();
        if r.by_node.contains_key(&node) {
            return Err(FabricError::Config(format!("{node} already has an endpoint")));
        }
        let idx = r.endpoints.len();
        r.endpoints.push(EndpointState {
            node,
            addrs: Vec::new(),
            clock: 0,
            uplink_free: 0,
            inbox: BTreeMap::new(),
            closed: false,
        });
        r.by_node.insert(node, idx);
        Ok(SimEndpoint {
            fabric: self.clone(),
            idx,
            node,
        })
    }

    pub fn add_interceptor(&self, hook: Arc<dyn Interceptor>) {
        self.shared.interceptors.write().push(hook);
    }

    pub fn clear_interceptors(&self) {
        self.shared.interceptors.write().clear();
    }

    pub fn stats(&self) -> Arc<StatsRegistry> {
        self.shared.stats.clone()
    }

    pub fn frame_log(&self) -> Vec<FrameLogEntry> {
        self.shared.router.lock().log.clone()
    }

    /// Current owner of `addr`, if bound.
    pub fn owner_of(&self, addr: &PeerAddress) -> Option<NodeId> {
        let r = self.shared.router.lock();
        r.bindings.get(addr).map(|&i| r.endpoints[i].node)
    }

    pub fn addresses_of(&self, node: NodeId) -> Vec<PeerAddress> {
        let r = self.shared.router.lock();
        r.by_node
            .get(&node)
            .map(|&i| r.endpoints[i].addrs.clone())
            .unwrap_or_default()
    }

    pub fn is_bound(&self, addr: &PeerAddress) -> bool {
        self.shared.router.lock().bindings.contains_key(addr)
    }

    /// Earliest queued arrival over all endpoints, `(time, receiver)`.
    pub fn peek_earliest(&self) -> Option<(Micros, NodeId)> {
        let r = self.shared.router.lock();
        r.endpoints
            .iter()
            .filter(|e| !e.closed)
            .filter_map(|e| e.inbox.keys().next().map(|k| (k.0, e.node)))
            .min()
    }

    /// Pops `node`'s earliest queued frame and advances its clock to the arrival.
    pub fn pop_next(&self, node: NodeId) -> Option<Delivery> {
        let mut r = self.shared.router.lock();
        let idx = *r.by_node.get(&node)?;
        let ep = &mut r.endpoints[idx];
        let (_, d) = ep.inbox.pop_first()?;
        ep.clock = ep.clock.max(d.arrived_at);
        Some(d)
    }

    pub fn set_clock(&self, node: NodeId, t: Micros) {
        let mut r = self.shared.router.lock();
        if let Some(&idx) = r.by_node.get(&node) {
            let ep = &mut r.endpoints[idx];
            ep.clock = ep.clock.max(t);
        }
    }

    pub fn clock_of(&self, node: NodeId) -> Option<Micros> {
        let r = self.shared.router.lock();
        r.by_node.get(&node).map(|&i| r.endpoints[i].clock)
    }

    pub fn pending(&self) -> usize {
        let r = self.shared.router.lock();
        r.endpoints.iter().map(|e| e.inbox.len()).sum()
    }

    fn send(&self, from: usize, to: PeerAddress, frame: &Frame) -> Result<SendReceipt, FabricError> {
        let sh = &*self.shared;
        frame.check_size(sh.cfg.max_frame)?;
        let wire_len = frame.wire_len();
        let mut guard = sh.router.lock();
        let r = &mut *guard;
        let src = &r.endpoints[from];
        if src.closed {
            return Err(FabricError::Closed);
        }
        let src_node = src.node;
        let src_addr = src.addrs.last().copied();
        let now = src.clock;
        let seq = r.seq;
        r.seq += 1;

        let mut log = FrameLogEntry {
            seq,
            sent_at: now,
            arrival: None,
            src: src_node,
            dst: None,
            addressee: None,
            src_addr,
            dst_addr: to,
            kind: frame.kind,
            correlation_id: frame.correlation_id,
            wire_len,
            outcome: FrameOutcome::Unroutable,
        };
        let addressee = match r.bindings.get(&to) {
            Some(&i) if !r.endpoints[i].closed => i,
            _ => {
                sh.stats.record_routing_error(src_node);
                r.log.push(log);
                return Err(FabricError::Unroutable(to));
            }
        };
        let addressee_node = r.endpoints[addressee].node;
        log.addressee = Some(addressee_node);

        let view = FrameView {
            sent_at: now,
            src_node,
            src_addr,
            dst_addr: to,
            dst_node: addressee_node,
            frame,
        };
        let mut verdict = Verdict::Pass;
        for hook in sh.interceptors.read().iter() {
            match hook.inspect(&view) {
                Verdict::Pass => {}
                v => {
                    verdict = v;
                    break;
                }
            }
        }

        let (dst_idx, dst_addr) = match verdict {
            Verdict::Pass => (addressee, to),
            Verdict::Drop => {
                let link = sh.stats.link(src_node, addressee_node);
                link.record_sent(wire_len, frame.kind.is_control(), now);
                link.record_intercepted();
                log.outcome = FrameOutcome::Dropped;
                r.log.push(log);
                return Ok(SendReceipt::Lost);
            }
            Verdict::Redirect(addr) => match r.bindings.get(&addr) {
                Some(&i) if !r.endpoints[i].closed => {
                    sh.stats.link(src_node, addressee_node).record_intercepted();
                    (i, addr)
                }
                _ => (addressee, to),
            },
        };
        let dst_node = r.endpoints[dst_idx].node;
        log.dst = Some(dst_node);
        log.dst_addr = dst_addr;
        let redirected = dst_idx != addressee;

        let link_stats = sh.stats.link(src_node, dst_node);
        link_stats.record_sent(wire_len, frame.kind.is_control(), now);

        let tx_us = if sh.cfg.bandwidth_mbps > 0.0 {
            (wire_len as f64 * 8.0 / sh.cfg.bandwidth_mbps).ceil() as Micros
        } else {
            0
        };
        let depart = now.max(r.endpoints[from].uplink_free) + tx_us;
        r.endpoints[from].uplink_free = depart;

        let seed = sh.seed;
        let link = r
            .links
            .entry((src_node, dst_node))
            .or_insert_with(|| LinkState {
                rng: ChaCha8Rng::seed_from_u64(link_seed(seed, src_node, dst_node)),
                last_arrival: 0,
            });
        // always draw both values so the stream does not depend on outcomes
        let u: f64 = link.rng.gen();
        let latency = sh.latency.sample(&mut link.rng);
        if u < sh.cfg.loss_rate {
            link_stats.record_lost();
            log.outcome = FrameOutcome::Lost;
            r.log.push(log);
            return Ok(SendReceipt::Lost);
        }
        let arrival = (depart + latency).max(link.last_arrival);
        link.last_arrival = arrival;
        link_stats.record_received(wire_len, arrival - now, arrival);

        let delivery = Delivery {
            frame: frame.clone(),
            src_node,
            src_addr,
            dst_addr,
            sent_at: now,
            arrived_at: arrival,
        };
        r.endpoints[dst_idx]
            .inbox
            .insert((arrival, src_node, seq), delivery);
        log.arrival = Some(arrival);
        log.outcome = if redirected {
            FrameOutcome::Redirected
        } else {
            FrameOutcome::Delivered
        };
        r.log.push(log);
        Ok(SendReceipt::Delivered { arrival })
    }
}

/// A node's attachment to a [`SimFabric`].
#[derive(Clone)]
pub struct SimEndpoint {
    fabric: SimFabric,
    idx: usize,
    node: NodeId,
}

impl SimEndpoint {
    pub fn fabric(&self) -> &SimFabric {
        &self.fabric
    }

    pub fn advance(&self, by: Micros) {
        let mut r = self.fabric.shared.router.lock();
        r.endpoints[self.idx].clock += by;
    }

    pub fn set_clock(&self, t: Micros) {
        self.fabric.set_clock(self.node, t);
    }
}

impl Transport for SimEndpoint {
    fn node_id(&self) -> NodeId {
        self.node
    }

    fn virtual_time(&self) -> bool {
        true
    }

    fn now(&self) -> Micros {
        self.fabric.shared.router.lock().endpoints[self.idx].clock
    }

    fn bound_addresses(&self) -> Vec<PeerAddress> {
        self.fabric.shared.router.lock().endpoints[self.idx].addrs.clone()
    }

    fn bind(&self, addr: PeerAddress) -> Result<(), FabricError> {
        let mut r = self.fabric.shared.router.lock();
        if r.endpoints[self.idx].closed {
            return Err(FabricError::Closed);
        }
        if r.bindings.contains_key(&addr) {
            return Err(FabricError::AddressInUse(addr));
        }
        r.bindings.insert(addr, self.idx);
        r.endpoints[self.idx].addrs.push(addr);
        Ok(())
    }

    fn release(&self, addr: PeerAddress) -> Result<(), FabricError> {
        let mut r = self.fabric.shared.router.lock();
        if r.bindings.get(&addr) != Some(&self.idx) {
            return Err(FabricError::NotBound(addr));
        }
        r.bindings.remove(&addr);
        r.endpoints[self.idx].addrs.retain(|a| *a != addr);
        Ok(())
    }

    fn send_frame(&self, to: PeerAddress, frame: &Frame) -> Result<SendReceipt, FabricError> {
        self.fabric.send(self.idx, to, frame)
    }

    fn recv_frame(&self, timeout: Micros) -> Result<Received, FabricError> {
        let mut r = self.fabric.shared.router.lock();
        let ep = &mut r.endpoints[self.idx];
        if ep.closed {
            return Err(FabricError::Closed);
        }
        let deadline = ep.clock.saturating_add(timeout);
        match ep.inbox.first_key_value() {
            Some((k, _)) if k.0 <= deadline => {
                let (_, d) = ep.inbox.pop_first().expect("non-empty");
                ep.clock = ep.clock.max(d.arrived_at);
                Ok(Received::Frame(d))
            }
            _ => {
                ep.clock = deadline;
                Ok(Received::Timeout)
            }
        }
    }

    fn stats(&self) -> Arc<StatsRegistry> {
        self.fabric.stats()
    }

    fn close(&self) {
        let mut r = self.fabric.shared.router.lock();
        let addrs = std::mem::take(&mut r.endpoints[self.idx].addrs);
        for a in addrs {
            r.bindings.remove(&a);
        }
        let ep = &mut r.endpoints[self.idx];
        ep.closed = true;
        ep.inbox.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(port: u16) -> PeerAddress {
        format!("10.0.0.1:{port}").parse().unwrap()
    }

    fn fabric(loss: f64) -> SimFabric {
        SimFabric::new(
            FabricConfig {
                loss_rate: loss,
                ..FabricConfig::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn bind_connect_and_deliver() {
        let f = fabric(0.0);
        let a = f.endpoint(NodeId(0)).unwrap();
        let b = f.endpoint(NodeId(1)).unwrap();
        a.bind(addr(2000)).unwrap();
        b.bind(addr(2001)).unwrap();
        let frame = Frame::new(FrameKind::Control, 1, b"hi".to_vec());
        let receipt = a.send_frame(addr(2001), &frame).unwrap();
        assert!(matches!(receipt, SendReceipt::Delivered { .. }));
        match b.recv_frame(1_000_000).unwrap() {
            Received::Frame(d) => {
                assert_eq!(d.frame, frame);
                assert_eq!(d.src_node, NodeId(0));
                assert_eq!(d.src_addr, Some(addr(2000)));
            }
            Received::Timeout => panic!("frame not delivered"),
        }
    }

    #[test]
    fn double_bind_is_address_in_use() {
        let f = fabric(0.0);
        let a = f.endpoint(NodeId(0)).unwrap();
        let b = f.endpoint(NodeId(1)).unwrap();
        a.bind(addr(2000)).unwrap();
        assert!(matches!(b.bind(addr(2000)), Err(FabricError::AddressInUse(_))));
        a.release(addr(2000)).unwrap();
        b.bind(addr(2000)).unwrap();
    }

    #[test]
    fn timeout_advances_virtual_clock_exactly() {
        let f = fabric(0.0);
        let a = f.endpoint(NodeId(0)).unwrap();
        a.bind(addr(2000)).unwrap();
        assert_eq!(a.recv_frame(50_000).unwrap(), Received::Timeout);
        assert_eq!(a.now(), 50_000);
    }

    #[test]
    fn unknown_destination_is_routing_error() {
        let f = fabric(0.0);
        let a = f.endpoint(NodeId(0)).unwrap();
        let frame = Frame::new(FrameKind::Control, 0, vec![1]);
        assert!(matches!(
            a.send_frame(addr(3000), &frame),
            Err(FabricError::Unroutable(_))
        ));
        assert_eq!(f.stats().routing_errors(NodeId(0)), 1);
    }

    #[test]
    fn oversize_rejected_before_transmission() {
        let f = SimFabric::new(
            FabricConfig {
                max_frame: 4,
                ..FabricConfig::default()
            },
            1,
        )
        .unwrap();
        let a = f.endpoint(NodeId(0)).unwrap();
        let b = f.endpoint(NodeId(1)).unwrap();
        b.bind(addr(2001)).unwrap();
        let big = Frame::new(FrameKind::Control, 0, vec![0; 5]);
        assert!(matches!(
            a.send_frame(addr(2001), &big),
            Err(FabricError::FrameTooLarge { .. })
        ));
        assert!(f.frame_log().is_empty());
        assert_eq!(f.stats().snapshot().totals.frames_sent, 0);
    }

    #[test]
    fn per_link_fifo_holds_under_jitter() {
        let f = SimFabric::new(
            FabricConfig {
                latency_mean_ms: 5.0,
                latency_jitter_ms: Some(2.0),
                bandwidth_mbps: 0.0,
                ..FabricConfig::default()
            },
            3,
        )
        .unwrap();
        let a = f.endpoint(NodeId(0)).unwrap();
        let b = f.endpoint(NodeId(1)).unwrap();
        b.bind(addr(2001)).unwrap();
        for i in 0..200u32 {
            a.send_frame(addr(2001), &Frame::new(FrameKind::Control, i, vec![]))
                .unwrap();
            a.advance(100);
        }
        let mut expected = 0;
        while let Received::Frame(d) = b.recv_frame(1_000_000).unwrap() {
            assert_eq!(d.frame.correlation_id, expected);
            expected += 1;
        }
        assert_eq!(expected, 200);
    }

    #[test]
    fn released_binding_keeps_queued_frames() {
        let f = fabric(0.0);
        let a = f.endpoint(NodeId(0)).unwrap();
        let b = f.endpoint(NodeId(1)).unwrap();
        b.bind(addr(2001)).unwrap();
        b.bind(addr(2002)).unwrap();
        a.send_frame(addr(2001), &Frame::new(FrameKind::Control, 0, vec![]))
            .unwrap();
        b.release(addr(2001)).unwrap();
        assert!(matches!(b.recv_frame(1_000_000).unwrap(), Received::Frame(_)));
        assert_eq!(b.primary_address(), Some(addr(2002)));
    }
}
