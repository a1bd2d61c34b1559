mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use ptdf_admm::partition::{build_area_topology, partition_fallback, partition_from_areas, PartitionError};
use ptdf_admm::{AreaId, BusId};

#[test]
fn path_splits_in_halves() {
    let net = common::network(4, &[0, 1, 2], &[], &[10.0], &[0.0; 4]);
    let part = partition_fallback(&net, 2, 0).unwrap();
    let area = |b: u32| part.area_of[&BusId(b)];
    assert_eq!(area(1), area(2));
    assert_eq!(area(3), area(4));
    assert_ne!(area(1), area(3));
}

#[test]
fn area_tags_are_used_verbatim() {
    let net = common::load("tiny5");
    let part = partition_from_areas(&net).unwrap();
    assert_eq!(part.areas, vec![AreaId(1), AreaId(2), AreaId(3)]);
    assert_eq!(part.buses_of(AreaId(3)), vec![BusId(4), BusId(5)]);
    assert_eq!(partition_from_areas(&common::load(common::PGLIB57)), Err(PartitionError::SingleArea));
}

#[test]
fn bad_k_is_rejected() {
    let net = common::load("tiny3");
    assert!(partition_fallback(&net, 1, 0).is_err());
    assert!(partition_fallback(&net, 4, 0).is_err());
}

#[test]
fn tiny5_topology() {
    let net = common::load("tiny5");
    let part = partition_from_areas(&net).unwrap();
    let topos = build_area_topology(&net, &part, net.reference_bus).unwrap();
    let a1 = &topos[0];
    assert_eq!(a1.internal, vec![BusId(1), BusId(2)]);
    assert_eq!(a1.shared_internal, vec![BusId(1), BusId(2)]);
    assert_eq!(a1.shared_boundary, vec![BusId(3), BusId(4)]);
    // Bus 5 is the only bus area 1 cannot see.
    assert_eq!(a1.beta, vec![BusId(5)]);
    // Three tie-lines, each shared from both ends.
    assert_eq!(a1.shared.pairs.len(), 6);
}

proptest! {
    #[test]
    fn fallback_partition_invariants(
        n in 4usize..14,
        tree in prop::collection::vec(0usize..100, 13),
        extra in prop::collection::vec((0usize..100, 0usize..100), 0..5),
        k in 2usize..5,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= n);
        let net = common::network(n, &tree[..n - 1], &extra, &[10.0], &vec![0.0; n]);
        let part = partition_fallback(&net, k, seed).unwrap();
        // Every bus in exactly one of k non-empty areas.
        prop_assert_eq!(part.area_of.len(), n);
        prop_assert_eq!(part.areas.len(), k);
        prop_assert!(part.validate(&net).is_ok());
        let again = partition_fallback(&net, k, seed).unwrap();
        prop_assert_eq!(&part.area_of, &again.area_of);

        let topos = build_area_topology(&net, &part, net.reference_bus).unwrap();
        for t in &topos {
            let alpha: BTreeSet<BusId> = t.alpha.iter().copied().collect();
            let beta: BTreeSet<BusId> = t.beta.iter().copied().collect();
            prop_assert!(alpha.is_disjoint(&beta));
            prop_assert_eq!(alpha.len() + beta.len(), n);
            prop_assert!(alpha.contains(&net.reference_bus));
            for b in &t.shared_boundary {
                prop_assert!(part.area_of[b] != t.area);
            }
        }
    }
}
