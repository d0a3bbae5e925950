use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::capture::CapturedFrame;
use crate::crypto::{seal, KemKeyPair, SessionKey};
use crate::driver::Actor;
use crate::fabric::{
    Delivery, FrameKind, FrameLogEntry, FrameOutcome, FrameView, Interceptor, Micros, PeerAddress,
    Transport, Verdict,
};
use crate::fabric::Frame;
use crate::ids::NodeId;
use crate::model::ModelParams;
use crate::mtd::{mtd_select_neighbors, NeighborPool};
use crate::node::RoundRecord;
use crate::protocol::ModelMessage;

struct Frozen {
    target_addrs: BTreeSet<PeerAddress>,
    neighbor_addrs: BTreeMap<PeerAddress, NodeId>,
}

struct EclipseState {
    learned: BTreeMap<NodeId, BTreeSet<PeerAddress>>,
    frozen: Option<Frozen>,
    redirected: u64,
    dropped: u64,
}

/// Routing manipulation around the target `T`.
///
/// Addresses are learned passively from traffic and frozen when the first
/// model frame of the attack window involving `T` is seen. From then on,
/// `T`'s model frames to a frozen neighbor address are redirected to an
/// attacker and model frames from neighbors to a frozen `T` address are
/// dropped. Traffic to addresses adopted after freezing passes untouched.
pub struct EclipseInterceptor {
    target: NodeId,
    neighbors: Vec<NodeId>,
    attackers: Vec<PeerAddress>,
    window: RangeInclusive<u32>,
    state: Mutex<EclipseState>,
}

impl EclipseInterceptor {
    pub fn new(
        target: NodeId,
        neighbors: impl IntoIterator<Item = NodeId>,
        attackers: Vec<PeerAddress>,
        window: RangeInclusive<u32>,
    ) -> Arc<Self> {
        Arc::new(EclipseInterceptor {
            target,
            neighbors: neighbors.into_iter().collect(),
            attackers,
            window,
            state: Mutex::new(EclipseState {
                learned: BTreeMap::new(),
                frozen: None,
                redirected: 0,
                dropped: 0,
            }),
        })
    }

    /// `(redirected, dropped)` frame counts.
    pub fn counts(&self) -> (u64, u64) {
        let s = self.state.lock();
        (s.redirected, s.dropped)
    }

    fn attacker_for(&self, neighbor: NodeId) -> PeerAddress {
        let i = self.neighbors.iter().position(|&n| n == neighbor).unwrap_or(0);
        self.attackers[i % self.attackers.len()]
    }
}

impl Interceptor for EclipseInterceptor {
    fn inspect(&self, v: &FrameView<'_>) -> Verdict {
        let mut s = self.state.lock();
        if let Some(a) = v.src_addr {
            s.learned.entry(v.src_node).or_default().insert(a);
        }
        s.learned.entry(v.dst_node).or_default().insert(v.dst_addr);
        if v.frame.kind != FrameKind::ModelExchange || !self.window.contains(&v.frame.correlation_id) {
            return Verdict::Pass;
        }
        let involves_target = v.src_node == self.target || v.dst_node == self.target;
        if s.frozen.is_none() && involves_target {
            let target_addrs = s.learned.get(&self.target).cloned().unwrap_or_default();
            let neighbor_addrs = self
                .neighbors
                .iter()
                .flat_map(|&n| {
                    s.learned
                        .get(&n)
                        .into_iter()
                        .flatten()
                        .map(move |&a| (a, n))
                })
                .collect();
            s.frozen = Some(Frozen {
                target_addrs,
                neighbor_addrs,
            });
        }
        let Some(f) = &s.frozen else {
            return Verdict::Pass;
        };
        if v.src_node == self.target {
            if let Some(&n) = f.neighbor_addrs.get(&v.dst_addr) {
                s.redirected += 1;
                return Verdict::Redirect(self.attacker_for(n));
            }
        } else if self.neighbors.contains(&v.src_node) && f.target_addrs.contains(&v.dst_addr) {
            s.dropped += 1;
            return Verdict::Drop;
        }
        Verdict::Pass
    }
}

/// External attacker endpoint: captures what is redirected to it and
/// answers the target with crafted model frames that claim to come from
/// its honest neighbors.
pub struct EclipseAttacker {
    id: NodeId,
    transport: Box<dyn Transport>,
    target: NodeId,
    impersonate: Vec<NodeId>,
    decoy: ModelParams,
    kem: KemKeyPair,
    session: Option<SessionKey>,
    rng: ChaCha8Rng,
    encrypted: bool,
    mimicked: BTreeSet<(u32, NodeId)>,
    captured: Vec<CapturedFrame>,
    mimic_frames: u32,
}

impl EclipseAttacker {
    /// Binds `address`. `decoy` is the parameter set sent when nothing
    /// could be recovered; `encrypted` tells the attacker to wrap its
    /// frames in envelopes (sealed with its own keys).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: NodeId,
        transport: Box<dyn Transport>,
        address: PeerAddress,
        target: NodeId,
        impersonate: Vec<NodeId>,
        decoy: ModelParams,
        encrypted: bool,
        seed: u64,
    ) -> Result<Self, crate::fabric::FabricError> {
        transport.bind(address)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.0 as u64);
        let kem = KemKeyPair::generate(&mut rng, 0, 0);
        let session = SessionKey::generate(&mut rng, 0).ok();
        Ok(EclipseAttacker {
            id,
            transport,
            target,
            impersonate,
            decoy,
            kem,
            session,
            rng,
            encrypted,
            mimicked: BTreeSet::new(),
            captured: Vec::new(),
            mimic_frames: 0,
        })
    }

    pub fn captured(&self) -> &[CapturedFrame] {
        &self.captured
    }

    pub fn mimic_frames(&self) -> u32 {
        self.mimic_frames
    }

    fn mimic(&mut self, round: u32, to: PeerAddress, params: &ModelParams) {
        for h in self.impersonate.clone() {
            if !self.mimicked.insert((round, h)) {
                continue;
            }
            let msg = ModelMessage {
                sender: h,
                round,
                reply: true,
                params: params.clone(),
            };
            let body = if self.encrypted {
                // no access to the victim's keys: seal to our own key
                let Some(mut session) = self.session.take() else { return };
                let r = seal(&msg.to_bytes(), h, &self.kem, &self.kem.public_key(), &mut session, &mut self.rng);
                self.session = Some(session);
                match r {
                    Ok(env) => env.encode(),
                    Err(_) => continue,
                }
            } else {
                msg.to_bytes()
            };
            let frame = Frame::new(FrameKind::ModelExchange, round, body);
            if self.transport.send_frame(to, &frame).is_ok() {
                self.mimic_frames += 1;
            }
        }
    }
}

impl Actor for EclipseAttacker {
    fn id(&self) -> NodeId {
        self.id
    }

    fn transport(&self) -> &dyn Transport {
        self.transport.as_ref()
    }

    fn next_timer(&self) -> Option<Micros> {
        None
    }

    fn on_timer(&mut self, _now: Micros) {}

    fn on_frame(&mut self, d: Delivery) {
        if d.frame.kind != FrameKind::ModelExchange || d.src_node != self.target {
            return;
        }
        self.captured.push(CapturedFrame {
            at_us: d.sent_at,
            src: d.src_node,
            dst: self.id,
            src_addr: d.src_addr,
            dst_addr: d.dst_addr,
            kind: d.frame.kind,
            correlation_id: d.frame.correlation_id,
            wire_len: d.frame.wire_len(),
            body: d.frame.body.clone(),
        });
        let round = d.frame.correlation_id;
        let params = ModelMessage::from_bytes(&d.frame.body)
            .map(|m| m.params)
            .unwrap_or_else(|_| self.decoy.clone());
        if let Some(to) = d.src_addr {
            self.mimic(round, to, &params);
        }
    }

    fn finished(&self) -> bool {
        true
    }
}

/// Rounds of the window in which the target exchanged no model frame with
/// any honest participant, judged from the fabric log.
pub fn isolated_rounds(
    target: NodeId,
    records: &[RoundRecord],
    window: RangeInclusive<u32>,
    log: &[FrameLogEntry],
) -> u32 {
    let honest = |n: NodeId| !n.is_attacker() && !n.is_controller() && n != target;
    let mut isolated = 0;
    for r in records.iter().filter(|r| window.contains(&r.round)) {
        let touched = log.iter().any(|e| {
            e.kind == FrameKind::ModelExchange
                && e.outcome == FrameOutcome::Delivered
                && e.sent_at >= r.start_us
                && e.sent_at <= r.end_us
                && match e.dst {
                    Some(d) => (e.src == target && honest(d)) || (d == target && honest(e.src)),
                    None => false,
                }
        });
        if !touched {
            isolated += 1;
        }
    }
    isolated
}

/// `C(a, n) / C(m, n)`: chance that a uniform `n`-subset of `m` candidates
/// falls entirely inside `a` attacker-adjacent ones.
pub fn isolation_probability(m: usize, a: usize, n: usize) -> f64 {
    if n > a || n > m {
        return 0.0;
    }
    // product form avoids large binomials
    (0..n).map(|i| (a - i) as f64 / (m - i) as f64).product()
}

/// Fraction of `trials` neighbor draws (size `n` from `m` candidates) that
/// land entirely inside the first `a` candidates.
pub fn monte_carlo_isolation(m: usize, a: usize, n: usize, trials: u32, seed: u64) -> f64 {
    let ids: Vec<NodeId> = (0..m as u32).map(NodeId).collect();
    let Ok(pool) = NeighborPool::new(ids, n) else {
        return 0.0;
    };
    let adjacent: BTreeSet<NodeId> = (0..a as u32).map(NodeId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..trials)
        .filter(|_| mtd_select_neighbors(&pool, &mut rng).is_subset(&adjacent))
        .count();
    hits as f64 / trials.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(isolation_probability(7, 2, 3), 0.0);
        assert!((isolation_probability(7, 3, 3) - 1.0 / 35.0).abs() < 1e-15);
        assert_eq!(isolation_probability(5, 5, 5), 1.0);
    }

    #[test]
    fn monte_carlo_tracks_closed_form() {
        let est = monte_carlo_isolation(7, 3, 3, 20_000, 11);
        assert!((est - 1.0 / 35.0).abs() < 0.01, "{est}");
        assert_eq!(monte_carlo_isolation(7, 2, 3, 2_000, 11), 0.0);
    }
}
