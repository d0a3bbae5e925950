mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use common::{all_adjacent_probability, chi_square_uniform_p};
use dflshield_core::adversary::{isolation_probability, monte_carlo_isolation};
use dflshield_core::fabric::{AddressPool, PeerAddress};
use dflshield_core::ids::NodeId;
use dflshield_core::mtd::{
    mtd_rotate_address, mtd_select_neighbors, AddressBook, NeighborPool, RendezvousNotice, Rotation,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALPHA: f64 = 0.01;

fn pool(m: u32, n: usize) -> NeighborPool {
    NeighborPool::new((0..m).map(NodeId), n).unwrap()
}

#[test]
fn neighbor_selection_is_uniform_over_subsets() {
    let p = pool(10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut subsets: BTreeMap<Vec<NodeId>, u64> = BTreeMap::new();
    let mut members = vec![0u64; 10];
    for _ in 0..100_000 {
        let s = mtd_select_neighbors(&p, &mut rng);
        assert_eq!(s.len(), 3);
        for id in &s {
            members[id.0 as usize] += 1;
        }
        *subsets.entry(s.into_iter().collect()).or_default() += 1;
    }
    assert_eq!(subsets.len(), 120);
    let counts: Vec<u64> = subsets.values().copied().collect();
    let p_subsets = chi_square_uniform_p(&counts);
    let p_members = chi_square_uniform_p(&members);
    assert!(p_subsets > ALPHA, "subset p-value {p_subsets}");
    assert!(p_members > ALPHA, "membership p-value {p_members}");
}

#[test]
fn port_rotation_is_uniform() {
    let ip = Ipv4Addr::new(10, 1, 0, 1);
    let pool = AddressPool::new(vec![ip], 20000, 20009).unwrap();
    let book = AddressBook::new(PeerAddress::new(ip, 20000).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut counts = vec![0u64; 10];
    for _ in 0..1000 {
        let before = book.self_binding();
        match mtd_rotate_address(&book, NodeId(0), &pool, &BTreeSet::new(), 0, &mut rng) {
            Rotation::Moved { address, notice } => {
                assert_ne!(address, before.address);
                assert_eq!(notice.effective_epoch, before.epoch + 1);
                counts[(address.port() - 20000) as usize] += 1;
                book.set_self_binding(address, notice.effective_epoch);
            }
            Rotation::Skipped => panic!("ten ports leave room to move"),
        }
    }
    let p = chi_square_uniform_p(&counts);
    assert!(p > ALPHA, "port p-value {p}, counts {counts:?}");
}

#[test]
fn isolation_probability_matches_binomial_ratio() {
    for m in 1..=20u64 {
        for a in 0..=m {
            for n in 1..=m {
                let got = isolation_probability(m as usize, a as usize, n as usize);
                let want = all_adjacent_probability(m, a, n);
                assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "m={m} a={a} n={n}");
            }
        }
    }
}

#[test]
fn sampled_isolation_rate_tracks_closed_form() {
    for (m, a, n) in [(7u64, 3u64, 3u64), (10, 5, 2), (49, 10, 2)] {
        let rate = monte_carlo_isolation(m as usize, a as usize, n as usize, 20_000, m * 100 + a);
        let want = all_adjacent_probability(m, a, n);
        assert!((rate - want).abs() <= 0.01, "m={m} a={a} n={n}: {rate} vs {want}");
    }
}

proptest! {
    #[test]
    fn selection_draws_distinct_pool_members(m in 1u32..60, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + ((m - 1) as f64 * frac) as usize;
        let p = pool(m, n);
        let s = mtd_select_neighbors(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.iter().all(|id| id.0 < m));
    }

    #[test]
    fn rotation_stays_in_pool_and_moves(ips in 1u32..4, ports in 1u16..6, start in 0usize..24, seed in any::<u64>()) {
        let pool = AddressPool::new(AddressPool::ip_range(Ipv4Addr::new(10, 1, 0, 1), ips), 20000, 20000 + ports - 1).unwrap();
        let current = pool.nth(start % pool.len());
        let book = AddressBook::new(current);
        match mtd_rotate_address(&book, NodeId(2), &pool, &BTreeSet::new(), 5, &mut ChaCha8Rng::seed_from_u64(seed)) {
            Rotation::Moved { address, notice } => {
                prop_assert!(pool.contains(&address));
                prop_assert_ne!(address, current);
                prop_assert_eq!(notice.new_address, address);
            }
            Rotation::Skipped => prop_assert_eq!(pool.len(), 1),
        }
    }

    #[test]
    fn rendezvous_notice_round_trips(node in any::<u32>(), ip in any::<u32>(), port in 1024u16.., epoch in any::<u32>(), at in any::<u64>()) {
        let n = RendezvousNotice {
            node_id: NodeId(node),
            new_address: PeerAddress::new(Ipv4Addr::from(ip), port).unwrap(),
            effective_epoch: epoch,
            switch_at: at,
        };
        prop_assert_eq!(RendezvousNotice::from_bytes(&n.to_bytes()).unwrap(), n);
    }
}
