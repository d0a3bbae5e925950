//! Moving target defense: per-round random neighbor sampling and address
//! rotation announced through rendezvous notices.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::RwLock;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{AddressPool, FabricError, PeerAddress};
use crate::ids::{Millis, NodeId};

#[derive(Debug, Error)]
pub enum MtdError {
    #[error("invalid neighbor pool: {0}")]
    Config(String),
    #[error("malformed rendezvous notice: {0}")]
    Malformed(String),
}

/// Default sample size `⌈|N_all| / 2⌉`.
pub fn default_sample_size(pool_len: usize) -> usize {
    pool_len.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborPool {
    all: Vec<NodeId>,
    sample_size: usize,
}

impl NeighborPool {
    /// An empty pool is allowed only with `n = 0` (a lone node).
    pub fn new(all: impl IntoIterator<Item = NodeId>, sample_size: usize) -> Result<Self, MtdError> {
        let set: BTreeSet<NodeId> = all.into_iter().collect();
        let all: Vec<NodeId> = set.into_iter().collect();
        if sample_size > all.len() {
            return Err(MtdError::Config(format!(
                "sample size {sample_size} exceeds pool of {}",
                all.len()
            )));
        }
        if sample_size == 0 && !all.is_empty() {
            return Err(MtdError::Config("sample size must be at least 1".into()));
        }
        Ok(NeighborPool { all, sample_size })
    }

    pub fn all(&self) -> &[NodeId] {
        &self.all
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }
}

/// `MTD_N`: draw uniformly from `N_all` until `n` distinct ids are held.
pub fn mtd_select_neighbors<R: Rng + ?Sized>(pool: &NeighborPool, rng: &mut R) -> BTreeSet<NodeId> {
    let mut chosen = BTreeSet::new();
    while chosen.len() < pool.sample_size {
        chosen.insert(pool.all[rng.gen_range(0..pool.all.len())]);
    }
    chosen
}

/// Connection details a node announces before moving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendezvousNotice {
    pub node_id: NodeId,
    pub new_address: PeerAddress,
    pub effective_epoch: u32,
    /// Milliseconds on the fabric clock.
    pub switch_at: Millis,
}

impl RendezvousNotice {
    pub const WIRE_LEN: usize = 22;

    /// `node_id u32 | ipv4 (4) | port u16 | effective_epoch u32 | switch_at u64`, big-endian.
    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut b = [0u8; Self::WIRE_LEN];
        b[..4].copy_from_slice(&self.node_id.0.to_be_bytes());
        b[4..10].copy_from_slice(&self.new_address.to_bytes());
        b[10..14].copy_from_slice(&self.effective_epoch.to_be_bytes());
        b[14..].copy_from_slice(&self.switch_at.to_be_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, MtdError> {
        if b.len() != Self::WIRE_LEN {
            return Err(MtdError::Malformed(format!(
                "expected {} bytes, got {}",
                Self::WIRE_LEN,
                b.len()
            )));
        }
        let addr: [u8; 6] = b[4..10].try_into().expect("6 bytes");
        Ok(RendezvousNotice {
            node_id: NodeId(u32::from_be_bytes(b[..4].try_into().expect("4"))),
            new_address: PeerAddress::from_bytes(&addr)
                .map_err(|e| MtdError::Malformed(e.to_string()))?,
            effective_epoch: u32::from_be_bytes(b[10..14].try_into().expect("4")),
            switch_at: u64::from_be_bytes(b[14..].try_into().expect("8")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookEntry {
    pub address: PeerAddress,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RendezvousOutcome {
    Applied,
    Stale,
    UnknownNode,
}

/// Current binding of every known peer plus this node's own binding.
///
/// Entries only move forward in epoch, so late or replayed notices are
/// harmless. Interior locking lets the receive path update entries while
/// the send path reads them.
#[derive(Debug)]
pub struct AddressBook {
    entries: RwLock<BTreeMap<NodeId, BookEntry>>,
    self_binding: RwLock<BookEntry>,
}

impl AddressBook {
    pub fn new(self_address: PeerAddress) -> Self {
        AddressBook {
            entries: RwLock::new(BTreeMap::new()),
            self_binding: RwLock::new(BookEntry {
                address: self_address,
                epoch: 0,
            }),
        }
    }

    /// Inserts or advances an entry; returns false when `epoch` is not newer.
    pub fn upsert(&self, node: NodeId, address: PeerAddress, epoch: u32) -> bool {
        let mut e = self.entries.write();
        match e.get(&node) {
            Some(cur) if cur.epoch >= epoch => false,
            _ => {
                e.insert(node, BookEntry { address, epoch });
                true
            }
        }
    }

    pub fn lookup(&self, node: NodeId) -> Option<PeerAddress> {
        self.entries.read().get(&node).map(|e| e.address)
    }

    pub fn entry(&self, node: NodeId) -> Option<BookEntry> {
        self.entries.read().get(&node).copied()
    }

    pub fn node_at(&self, addr: &PeerAddress) -> Option<NodeId> {
        self.entries
            .read()
            .iter()
            .find(|(_, e)| e.address == *addr)
            .map(|(&n, _)| n)
    }

    pub fn known_nodes(&self) -> Vec<NodeId> {
        self.entries.read().keys().copied().collect()
    }

    pub fn self_binding(&self) -> BookEntry {
        *self.self_binding.read()
    }

    pub fn set_self_binding(&self, address: PeerAddress, epoch: u32) {
        *self.self_binding.write() = BookEntry { address, epoch };
    }

    /// Replaces the entry iff the notice carries a newer epoch.
    pub fn apply_rendezvous(&self, notice: &RendezvousNotice) -> RendezvousOutcome {
        let mut e = self.entries.write();
        match e.get_mut(&notice.node_id) {
            None => RendezvousOutcome::UnknownNode,
            Some(cur) if notice.effective_epoch <= cur.epoch => RendezvousOutcome::Stale,
            Some(cur) => {
                *cur = BookEntry {
                    address: notice.new_address,
                    epoch: notice.effective_epoch,
                };
                RendezvousOutcome::Applied
            }
        }
    }
}

/// Result of one `MTD_IP` step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rotation {
    Moved {
        address: PeerAddress,
        notice: RendezvousNotice,
    },
    /// The pool offers nothing besides the current binding.
    Skipped,
}

/// `MTD_IP`: picks a new address uniformly from the pool product minus the
/// current binding and prepares the notice announcing it.
///
/// Addresses in `exclude` (for instance ones that failed to bind) are
/// skipped as well. The book is not modified; the caller broadcasts the
/// notice, binds, then commits with [`AddressBook::set_self_binding`].
pub fn mtd_rotate_address<R: Rng + ?Sized>(
    book: &AddressBook,
    node_id: NodeId,
    pool: &AddressPool,
    exclude: &BTreeSet<PeerAddress>,
    switch_at: Millis,
    rng: &mut R,
) -> Rotation {
    let current = book.self_binding();
    let candidates = pool.len();
    let blocked = |a: &PeerAddress| *a == current.address || exclude.contains(a);
    let blocked_count = exclude
        .iter()
        .chain(std::iter::once(&current.address))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|a| pool.contains(a))
        .count();
    if candidates <= blocked_count {
        return Rotation::Skipped;
    }
    let address = if blocked_count <= 1 {
        // fast path: index into the product, stepping over the one blocked slot
        let mut i = rng.gen_range(0..candidates - blocked_count);
        if blocked_count == 1 {
            let skip = (0..candidates).find(|&k| blocked(&pool.nth(k))).unwrap_or(candidates);
            if i >= skip {
                i += 1;
            }
        }
        pool.nth(i)
    } else {
        let free: Vec<usize> = (0..candidates).filter(|&k| !blocked(&pool.nth(k))).collect();
        pool.nth(free[rng.gen_range(0..free.len())])
    };
    Rotation::Moved {
        address,
        notice: RendezvousNotice {
            node_id,
            new_address: address,
            effective_epoch: current.epoch + 1,
            switch_at,
        },
    }
}

/// Rotates, retrying with the failed address excluded while `bind` reports
/// it in use. Other bind errors abort the rotation.
pub fn rotate_and_bind<R: Rng + ?Sized>(
    book: &AddressBook,
    node_id: NodeId,
    pool: &AddressPool,
    switch_at: Millis,
    rng: &mut R,
    mut bind: impl FnMut(PeerAddress) -> Result<(), FabricError>,
) -> Result<Rotation, FabricError> {
    let mut exclude = BTreeSet::new();
    loop {
        match mtd_rotate_address(book, node_id, pool, &exclude, switch_at, rng) {
            Rotation::Skipped => return Ok(Rotation::Skipped),
            Rotation::Moved { address, notice } => match bind(address) {
                Ok(()) => return Ok(Rotation::Moved { address, notice }),
                Err(FabricError::AddressInUse(a)) => {
                    exclude.insert(a);
                }
                Err(e) => return Err(e),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::net::Ipv4Addr;

    fn ids(n: u32) -> Vec<NodeId> {
        (0..n).map(NodeId).collect()
    }

    #[test]
    fn sample_has_n_distinct_members() {
        let pool = NeighborPool::new(ids(7), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = mtd_select_neighbors(&pool, &mut rng);
            assert_eq!(s.len(), 3);
            assert!(s.iter().all(|id| pool.all().contains(id)));
        }
        let full = NeighborPool::new(ids(7), 7).unwrap();
        assert_eq!(
            mtd_select_neighbors(&full, &mut rng),
            ids(7).into_iter().collect()
        );
    }

    #[test]
    fn oversized_sample_is_config_error() {
        assert!(NeighborPool::new(ids(3), 4).is_err());
        assert!(NeighborPool::new(ids(3), 0).is_err());
        assert!(NeighborPool::new(vec![], 0).is_ok());
        assert_eq!(default_sample_size(7), 4);
        assert_eq!(default_sample_size(9), 5);
    }

    #[test]
    fn notice_wire_round_trip() {
        let n = RendezvousNotice {
            node_id: NodeId(7),
            new_address: "10.0.0.9:4242".parse().unwrap(),
            effective_epoch: 3,
            switch_at: 123_456,
        };
        let b = n.to_bytes();
        assert_eq!(&b[..4], &[0, 0, 0, 7]);
        assert_eq!(&b[4..8], &[10, 0, 0, 9]);
        assert_eq!(RendezvousNotice::from_bytes(&b).unwrap(), n);
        assert!(RendezvousNotice::from_bytes(&b[..21]).is_err());
    }

    #[test]
    fn forced_choice_rotation() {
        let pool = AddressPool::new(vec![Ipv4Addr::new(10, 0, 0, 1)], 5000, 5001).unwrap();
        let book = AddressBook::new("10.0.0.1:5000".parse().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        match mtd_rotate_address(&book, NodeId(0), &pool, &BTreeSet::new(), 0, &mut rng) {
            Rotation::Moved { address, notice } => {
                assert_eq!(address.to_string(), "10.0.0.1:5001");
                assert_eq!(notice.effective_epoch, 1);
            }
            Rotation::Skipped => panic!("should move"),
        }
    }

    #[test]
    fn single_slot_pool_skips() {
        let pool = AddressPool::new(vec![Ipv4Addr::new(10, 0, 0, 1)], 5000, 5000).unwrap();
        let book = AddressBook::new("10.0.0.1:5000".parse().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            mtd_rotate_address(&book, NodeId(0), &pool, &BTreeSet::new(), 0, &mut rng),
            Rotation::Skipped
        );
    }

    #[test]
    fn bind_conflicts_trigger_reselection() {
        let pool = AddressPool::new(vec![Ipv4Addr::new(10, 0, 0, 1)], 5000, 5003).unwrap();
        let book = AddressBook::new("10.0.0.1:5000".parse().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let taken: BTreeSet<PeerAddress> = ["10.0.0.1:5001", "10.0.0.1:5002"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let r = rotate_and_bind(&book, NodeId(0), &pool, 0, &mut rng, |a| {
            if taken.contains(&a) {
                Err(FabricError::AddressInUse(a))
            } else {
                Ok(())
            }
        })
        .unwrap();
        assert!(matches!(r, Rotation::Moved { address, .. } if address.port() == 5003));
    }

    #[test]
    fn rendezvous_is_monotone_and_idempotent() {
        let book = AddressBook::new("10.0.0.1:5000".parse().unwrap());
        book.upsert(NodeId(1), "10.0.0.2:5000".parse().unwrap(), 0);
        let n1 = RendezvousNotice {
            node_id: NodeId(1),
            new_address: "10.0.0.2:5001".parse().unwrap(),
            effective_epoch: 1,
            switch_at: 0,
        };
        let n2 = RendezvousNotice {
            new_address: "10.0.0.2:5002".parse().unwrap(),
            effective_epoch: 2,
            ..n1
        };
        assert_eq!(book.apply_rendezvous(&n1), RendezvousOutcome::Applied);
        assert_eq!(book.apply_rendezvous(&n2), RendezvousOutcome::Applied);
        assert_eq!(book.apply_rendezvous(&n1), RendezvousOutcome::Stale);
        assert_eq!(book.apply_rendezvous(&n2), RendezvousOutcome::Stale);
        assert_eq!(book.lookup(NodeId(1)), Some(n2.new_address));
        let unknown = RendezvousNotice {
            node_id: NodeId(9),
            ..n1
        };
        assert_eq!(book.apply_rendezvous(&unknown), RendezvousOutcome::UnknownNode);
    }
}
