use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{KemPublicKey, KeyCertificate};
use crate::fabric::PeerAddress;
use crate::ids::{Millis, NodeId, Role};
use crate::protocol::MetricsReport;

/// What the controller knows about one authenticated node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub role: Role,
    pub address: PeerAddress,
    pub address_epoch: u32,
    pub public_key: Option<KemPublicKey>,
    pub previous_key: Option<KemPublicKey>,
    pub key_epoch: u32,
    pub cert: Option<KeyCertificate>,
    pub token_expires_at: Millis,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    entries: BTreeMap<NodeId, RegistryEntry>,
}

impl Registry {
    pub fn insert(&mut self, node: NodeId, entry: RegistryEntry) {
        self.entries.insert(node, entry);
    }

    pub fn get(&self, node: NodeId) -> Option<&RegistryEntry> {
        self.entries.get(&node)
    }

    pub fn get_mut(&mut self, node: NodeId) -> Option<&mut RegistryEntry> {
        self.entries.get_mut(&node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.entries.contains_key(&node)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &RegistryEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.entries.keys().copied().collect()
    }

    pub fn token_valid(&self, node: NodeId, now: Millis) -> bool {
        self.entries.get(&node).is_some_and(|e| now < e.token_expires_at)
    }

    /// Moves a node to a newer address epoch; older announcements are ignored.
    pub fn update_address(&mut self, node: NodeId, address: PeerAddress, epoch: u32) -> bool {
        match self.entries.get_mut(&node) {
            Some(e) if epoch > e.address_epoch => {
                e.address = address;
                e.address_epoch = epoch;
                true
            }
            _ => false,
        }
    }
}

/// For every registered node, the public keys of all other registered
/// nodes that hold one (`n - 1` keys when every node encrypts).
pub fn distribute_keys(registry: &Registry) -> BTreeMap<NodeId, BTreeMap<NodeId, KemPublicKey>> {
    let keys: BTreeMap<NodeId, KemPublicKey> = registry
        .iter()
        .filter_map(|(n, e)| e.public_key.map(|k| (n, k)))
        .collect();
    registry
        .nodes()
        .into_iter()
        .map(|me| {
            let others = keys
                .iter()
                .filter(|(&n, _)| n != me)
                .map(|(&n, &k)| (n, k))
                .collect();
            (me, others)
        })
        .collect()
}

/// Metrics reports keyed by `(node, round)`; each pair is stored once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    reports: BTreeMap<(NodeId, u32), MetricsReport>,
}

impl RunLedger {
    /// False when a report for the same node and round is already held.
    pub fn insert(&mut self, report: MetricsReport) -> bool {
        let key = (report.node_id, report.round);
        if self.reports.contains_key(&key) {
            return false;
        }
        self.reports.insert(key, report);
        true
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    /// Ordered by node, then round.
    pub fn reports(&self) -> impl Iterator<Item = &MetricsReport> {
        self.reports.values()
    }

    pub fn get(&self, node: NodeId, round: u32) -> Option<&MetricsReport> {
        self.reports.get(&(node, round))
    }

    pub fn rounds(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.reports.keys().map(|k| k.1).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn extend(&mut self, other: RunLedger) {
        for r in other.reports.into_values() {
            self.insert(r);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Stats {
    pub round: u32,
    pub nodes: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two nodes.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub per_round: Vec<F1Stats>,
    /// Statistics of the last round reported.
    pub final_f1: Option<F1Stats>,
    pub starved_rounds: usize,
    pub bytes_sent: u64,
    pub ctrl_bytes: u64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-round F1 mean ± sd across reporting nodes.
pub fn collect_metrics(ledger: &RunLedger) -> MetricsSummary {
    let mut by_round: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut starved_rounds = 0;
    let mut bytes_sent = 0;
    let mut ctrl_bytes = 0;
    for r in ledger.reports() {
        by_round.entry(r.round).or_default().push(r.f1);
        starved_rounds += usize::from(r.starved);
        bytes_sent += r.bytes_sent;
        ctrl_bytes += r.ctrl_bytes.unwrap_or(0);
    }
    let per_round: Vec<F1Stats> = by_round
        .into_iter()
        .map(|(round, f1s)| {
            let (mean, sd) = mean_sd(&f1s);
            F1Stats {
                round,
                nodes: f1s.len(),
                mean,
                sd,
            }
        })
        .collect();
    MetricsSummary {
        final_f1: per_round.last().copied(),
        per_round,
        starved_rounds,
        bytes_sent,
        ctrl_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn report(node: u32, round: u32, f1: f64) -> MetricsReport {
        MetricsReport {
            node_id: NodeId(node),
            round,
            f1,
            loss: 0.1,
            bytes_sent: 100,
            bytes_recv: 90,
            active_ms: 1.0,
            wall_ms: None,
            ctrl_bytes: Some(10),
            frames_sent: None,
            frames_lost: None,
            latency_ms: None,
            cpu_pct: None,
            ram_pct: None,
            starved: false,
        }
    }

    #[test]
    fn ledger_rejects_duplicates() {
        let mut l = RunLedger::default();
        assert!(l.insert(report(0, 0, 0.5)));
        assert!(!l.insert(report(0, 0, 0.9)));
        assert_eq!(l.get(NodeId(0), 0).unwrap().f1, 0.5);
    }

    #[test]
    fn summary_uses_sample_sd() {
        let mut l = RunLedger::default();
        l.insert(report(0, 1, 0.8));
        l.insert(report(1, 1, 1.0));
        l.insert(report(0, 0, 0.3));
        let s = collect_metrics(&l);
        let f = s.final_f1.unwrap();
        assert_eq!(f.round, 1);
        assert!((f.mean - 0.9).abs() < 1e-12);
        assert!((f.sd - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(s.per_round[0].sd, 0.0);
        assert_eq!(s.bytes_sent, 300);
    }

    #[test]
    fn every_node_gets_all_other_keys() {
        let mut reg = Registry::default();
        for i in 0..4u8 {
            reg.insert(
                NodeId(i as u32),
                RegistryEntry {
                    role: Role::Aggregator,
                    address: format!("10.0.0.{}:2000", i + 1).parse().unwrap(),
                    address_epoch: 0,
                    public_key: Some(KemPublicKey([i; 32])),
                    previous_key: None,
                    key_epoch: 0,
                    cert: None,
                    token_expires_at: 100,
                },
            );
        }
        let d = distribute_keys(&reg);
        for (me, keys) in d {
            assert_eq!(keys.len(), 3);
            assert!(!keys.contains_key(&me));
        }
        assert!(reg.token_valid(NodeId(0), 99));
        assert!(!reg.token_valid(NodeId(0), 100));
    }
}
