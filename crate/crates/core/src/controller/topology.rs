use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ControllerError;
use crate::ids::NodeId;

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TopologySpec {
    Ring,
    Full,
    /// Each edge present with probability `p`, then bridged to one component.
    Random {
        #[serde(default = "half")]
        p: f64,
    },
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::Random { p: 0.5 }
    }
}

impl TopologySpec {
    pub fn validate(&self) -> Result<(), ControllerError> {
        match self {
            TopologySpec::Random { p } if !(0.0..=1.0).contains(p) || p.is_nan() => Err(
                ControllerError::Config(format!("edge probability {p} is outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

/// Undirected graph over participants.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Topology {
    pub fn empty(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Topology {
            adj: nodes.into_iter().map(|n| (n, BTreeSet::new())).collect(),
        }
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId) {
        if a == b {
            return;
        }
        self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, n: NodeId) -> Vec<NodeId> {
        self.adj.get(&n).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adj.get(&n).map_or(0, BTreeSet::len)
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.adj
            .iter()
            .flat_map(|(&a, s)| s.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in self.adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut stack = vec![start];
            while let Some(n) = stack.pop() {
                for &m in &self.adj[&n] {
                    if seen.insert(m) {
                        comp.push(m);
                        stack.push(m);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Joins consecutive components with one random edge each.
    pub fn bridge<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let comps = self.components();
        for pair in comps.windows(2) {
            let a = *pair[0].choose(rng).expect("components are non-empty");
            let b = *pair[1].choose(rng).expect("components are non-empty");
            self.add_edge(a, b);
        }
    }

    /// The induced subgraph on `keep`, bridged back to one component.
    pub fn restrict<R: Rng + ?Sized>(&self, keep: &BTreeSet<NodeId>, rng: &mut R) -> Topology {
        let mut t = Topology::empty(keep.iter().copied());
        for (a, b) in self.edges() {
            if keep.contains(&a) && keep.contains(&b) {
                t.add_edge(a, b);
            }
        }
        t.bridge(rng);
        t
    }
}

/// Builds a connected topology over `nodes`.
pub fn build_topology<R: Rng + ?Sized>(
    spec: TopologySpec,
    nodes: &[NodeId],
    rng: &mut R,
) -> Result<Topology, ControllerError> {
    spec.validate()?;
    let mut ids: Vec<NodeId> = nodes.to_vec();
    ids.sort();
    ids.dedup();
    let mut t = Topology::empty(ids.iter().copied());
    match spec {
        TopologySpec::Ring => {
            if ids.len() > 1 {
                for i in 0..ids.len() {
                    t.add_edge(ids[i], ids[(i + 1) % ids.len()]);
                }
            }
        }
        TopologySpec::Full => {
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    t.add_edge(a, b);
                }
            }
        }
        TopologySpec::Random { p } => {
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    if rng.gen_bool(p) {
                        t.add_edge(a, b);
                    }
                }
            }
            t.bridge(rng);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: u32) -> Vec<NodeId> {
        (0..n).map(NodeId).collect()
    }

    #[test]
    fn ring_and_full_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ring = build_topology(TopologySpec::Ring, &ids(6), &mut rng).unwrap();
        assert!(ids(6).iter().all(|&n| ring.degree(n) == 2));
        let full = build_topology(TopologySpec::Full, &ids(6), &mut rng).unwrap();
        assert_eq!(full.edges().len(), 15);
        let pair = build_topology(TopologySpec::Ring, &ids(2), &mut rng).unwrap();
        assert_eq!(pair.edges(), vec![(NodeId(0), NodeId(1))]);
    }

    #[test]
    fn sparse_random_graph_is_bridged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = build_topology(TopologySpec::Random { p: 0.0 }, &ids(9), &mut rng).unwrap();
        assert!(t.is_connected());
        assert_eq!(t.edges().len(), 8);
    }

    #[test]
    fn restrict_keeps_connectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ring = build_topology(TopologySpec::Ring, &ids(8), &mut rng).unwrap();
        let keep: BTreeSet<NodeId> = [0, 2, 4, 6].map(NodeId).into_iter().collect();
        let sub = ring.restrict(&keep, &mut rng);
        assert!(sub.is_connected());
        assert_eq!(sub.len(), 4);
    }

    #[test]
    fn bad_probability_rejected() {
        assert!(TopologySpec::Random { p: 1.5 }.validate().is_err());
        assert!(TopologySpec::Random { p: f64::NAN }.validate().is_err());
    }
}
