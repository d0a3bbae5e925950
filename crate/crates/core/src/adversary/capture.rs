use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::plan::TapSpec;
use crate::crypto::SecureEnvelope;
use crate::fabric::{communication_frequency, FrameKind, FrameView, Interceptor, Micros, PeerAddress, Verdict};
use crate::ids::{NodeId, Role};
use crate::model::ModelParams;
use crate::protocol::ModelMessage;

/// One frame as seen on the wire by an attacker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedFrame {
    pub at_us: Micros,
    /// Fabric endpoints; the analysis only uses the addresses and bodies.
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_addr: Option<PeerAddress>,
    pub dst_addr: PeerAddress,
    pub kind: FrameKind,
    pub correlation_id: u32,
    pub wire_len: usize,
    #[serde(with = "b64_body")]
    pub body: Vec<u8>,
}

mod b64_body {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD
            .decode(String::deserialize(d)?)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredParams {
    pub at_us: Micros,
    pub claimed_sender: NodeId,
    pub round: u32,
    pub params: ModelParams,
}

/// Everything an attacker extracted from captured traffic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptureLog {
    pub frames: Vec<CapturedFrame>,
    pub recovered_params: Vec<RecoveredParams>,
    pub inferred_topology: BTreeSet<(NodeId, NodeId)>,
    pub inferred_roles: BTreeMap<NodeId, Role>,
    pub activity_map: BTreeMap<NodeId, Vec<(Micros, Micros)>>,
}

impl CaptureLog {
    pub fn from_frames(frames: Vec<CapturedFrame>) -> Self {
        let recovered_params = frames
            .iter()
            .filter(|f| f.kind == FrameKind::ModelExchange)
            .filter_map(|f| {
                ModelMessage::from_bytes(&f.body).ok().map(|m| RecoveredParams {
                    at_us: f.at_us,
                    claimed_sender: m.sender,
                    round: m.round,
                    params: m.params,
                })
            })
            .collect();
        let mut log = CaptureLog {
            frames,
            recovered_params,
            ..Default::default()
        };
        let map = infer_network(&log.frames);
        log.inferred_topology = map.edges;
        log.inferred_roles = map.roles;
        log.activity_map = map.activity;
        log
    }

    pub fn tapped_bytes(&self, src: NodeId, dst: NodeId) -> u64 {
        self.frames
            .iter()
            .filter(|f| f.src == src && f.dst == dst)
            .map(|f| f.wire_len as u64)
            .sum()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Self> {
        let mut frames = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(serde_json::from_str(&line)?);
        }
        Ok(CaptureLog::from_frames(frames))
    }
}

/// Passive tap: copies matching frames and always passes them on.
pub struct TapInterceptor {
    spec: TapSpec,
    target: NodeId,
    frames: Mutex<Vec<CapturedFrame>>,
}

impl TapInterceptor {
    pub fn new(spec: TapSpec, target: NodeId) -> Arc<Self> {
        Arc::new(TapInterceptor {
            spec,
            target,
            frames: Mutex::new(Vec::new()),
        })
    }

    pub fn frames(&self) -> Vec<CapturedFrame> {
        self.frames.lock().clone()
    }

    pub fn capture(&self) -> CaptureLog {
        CaptureLog::from_frames(self.frames())
    }
}

impl Interceptor for TapInterceptor {
    fn inspect(&self, v: &FrameView<'_>) -> Verdict {
        let participant = |n: NodeId| !n.is_controller() && !n.is_attacker();
        if participant(v.src_node)
            && participant(v.dst_node)
            && self.spec.covers(self.target, v.src_node, v.dst_node)
        {
            self.frames.lock().push(CapturedFrame {
                at_us: v.sent_at,
                src: v.src_node,
                dst: v.dst_node,
                src_addr: v.src_addr,
                dst_addr: v.dst_addr,
                kind: v.frame.kind,
                correlation_id: v.frame.correlation_id,
                wire_len: v.frame.wire_len(),
                body: v.frame.body.clone(),
            });
        }
        Verdict::Pass
    }
}

/// Attacker-side reconstruction of the federation from captured frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkMap {
    /// Undirected edges `(low, high)`.
    pub edges: BTreeSet<(NodeId, NodeId)>,
    pub roles: BTreeMap<NodeId, Role>,
    /// `F_ij` over directed model messages.
    pub frequency: BTreeMap<(NodeId, NodeId), f64>,
    pub activity: BTreeMap<NodeId, Vec<(Micros, Micros)>>,
}

fn claimed_sender(f: &CapturedFrame) -> Option<NodeId> {
    match f.kind {
        FrameKind::ModelExchange => ModelMessage::from_bytes(&f.body)
            .map(|m| m.sender)
            .ok()
            .or_else(|| SecureEnvelope::decode(&f.body).ok().map(|e| e.sender_id)),
        FrameKind::RendezvousNotice => SecureEnvelope::decode(&f.body).ok().map(|e| e.sender_id),
        _ => None,
    }
}

/// Infers identities from what the wire reveals: the sender id carried in
/// plaintext messages or envelope headers, and destination addresses
/// matched against addresses previously seen as sources.
pub fn infer_network(frames: &[CapturedFrame]) -> NetworkMap {
    let mut addr_owner: BTreeMap<PeerAddress, NodeId> = BTreeMap::new();
    let mut messages = Vec::new();
    // addresses learned later in the capture still help earlier frames
    for f in frames {
        if let (Some(s), Some(a)) = (claimed_sender(f), f.src_addr) {
            addr_owner.insert(a, s);
        }
    }
    let mut fan_in: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    let mut rounds: BTreeMap<(NodeId, u32), (Micros, Micros)> = BTreeMap::new();
    for f in frames.iter().filter(|f| f.kind == FrameKind::ModelExchange) {
        let Some(s) = claimed_sender(f) else { continue };
        seen.insert(s);
        let span = rounds.entry((s, f.correlation_id)).or_insert((f.at_us, f.at_us));
        span.0 = span.0.min(f.at_us);
        span.1 = span.1.max(f.at_us);
        let Some(&d) = addr_owner.get(&f.dst_addr) else { continue };
        if d == s {
            continue;
        }
        seen.insert(d);
        messages.push((s, d));
        fan_in.entry(d).or_default().insert(s);
    }
    let edges = messages.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let roles = seen
        .into_iter()
        .map(|n| {
            let role = if fan_in.get(&n).is_some_and(|s| !s.is_empty()) {
                Role::Aggregator
            } else {
                Role::Trainer
            };
            (n, role)
        })
        .collect();
    let mut activity: BTreeMap<NodeId, Vec<(Micros, Micros)>> = BTreeMap::new();
    for ((n, _), span) in rounds {
        activity.entry(n).or_default().push(span);
    }
    for v in activity.values_mut() {
        v.sort();
    }
    NetworkMap {
        edges,
        roles,
        frequency: communication_frequency(messages),
        activity,
    }
}

/// Share of ground-truth edges present in the inferred set.
pub fn topology_recall(
    inferred: &BTreeSet<(NodeId, NodeId)>,
    truth: impl IntoIterator<Item = (NodeId, NodeId)>,
) -> f64 {
    let truth: BTreeSet<(NodeId, NodeId)> = truth.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
    if truth.is_empty() {
        return 1.0;
    }
    truth.iter().filter(|e| inferred.contains(e)).count() as f64 / truth.len() as f64
}
