mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ptdf_admm::kron::{kron_reduce, local_ptdf};
use ptdf_admm::netmatrix::{build_susceptance, compute_ptdf, dc_power_flow};
use ptdf_admm::BusId;

fn ids(v: &[u32]) -> Vec<BusId> {
    v.iter().map(|&k| BusId(k)).collect()
}

#[test]
fn triangle_injection_at_bus_two() {
    // Equal reactances: two thirds of the unit goes the direct way.
    let net = common::load("tiny3");
    let h = compute_ptdf(&build_susceptance(&net), net.reference_bus).unwrap();
    let col: Vec<f64> = h.h.column(1).iter().copied().collect();
    for (got, want) in col.iter().zip([-2.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]) {
        assert!((got - want).abs() < 1e-12, "{col:?}");
    }
}

#[test]
fn ptdf_matches_finite_differences() {
    let net = common::load("tiny3");
    let mats = build_susceptance(&net);
    let h = compute_ptdf(&mats, net.reference_bus).unwrap();
    let r = mats.position(net.reference_bus).unwrap();
    let base = DVector::from_vec(vec![1.0, -1.5, 0.5]);
    let (_, f0) = dc_power_flow(&mats, &base, net.reference_bus).unwrap();
    let eps = 1e-4;
    for k in 0..3 {
        let mut p = base.clone();
        p[k] += eps;
        p[r] -= eps;
        let (_, f) = dc_power_flow(&mats, &p, net.reference_bus).unwrap();
        let fd = (f - &f0) / eps;
        assert!((fd - h.h.column(k)).amax() < 1e-9, "column {k}");
    }
}

#[test]
fn balanced_flows_do_not_depend_on_reference() {
    let net = common::load(common::PGLIB57);
    let mats = build_susceptance(&net);
    let mut p = DVector::from_fn(mats.bus_order.len(), |k, _| ((k * 7919) % 13) as f64 / 10.0 - 0.6);
    let mean = p.mean();
    p.add_scalar_mut(-mean);
    let f1 = compute_ptdf(&mats, BusId(1)).unwrap().flows(&p);
    for r in [8, 30, 57] {
        let f = compute_ptdf(&mats, BusId(r)).unwrap().flows(&p);
        assert!((&f - &f1).amax() < 1e-8, "reference {r}");
    }
}

#[test]
fn kron_triangle_by_hand() {
    let net = common::load("tiny3");
    let mats = build_susceptance(&net);
    let red = kron_reduce(&mats, &ids(&[1, 2]), &ids(&[3])).unwrap();
    assert!((&red.accompanying - DMatrix::from_row_slice(2, 1, &[0.5, 0.5])).amax() < 1e-12);
    let want = DMatrix::from_row_slice(2, 2, &[15.0, -15.0, -15.0, 15.0]);
    assert!((&red.b_tilde - want).amax() < 1e-12, "{}", red.b_tilde);
}

#[test]
fn local_ptdf_on_a_reduced_triangle() {
    // After eliminating bus 3 the pair behaves like one line of susceptance 15.
    let net = common::load("tiny3");
    let mats = build_susceptance(&net);
    let red = kron_reduce(&mats, &ids(&[1, 2]), &ids(&[3])).unwrap();
    let h = local_ptdf(&red, &net, &[0], BusId(1)).unwrap();
    // Line 1-2 (b = 10) carries 10/15 of a transfer from 2 to 1.
    assert!((h.h[(0, 1)] + 10.0 / 15.0).abs() < 1e-12, "{}", h.h);
    assert_eq!(h.h[(0, 0)], 0.0);
}

fn random_network() -> impl Strategy<Value = ptdf_admm::Network> {
    (3usize..9).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0usize..100, n - 1),
            prop::collection::vec((0usize..100, 0usize..100), 0..4),
            prop::collection::vec(1.0f64..25.0, 1..12),
            prop::collection::vec(0.0f64..0.5, n),
        )
            .prop_map(|(n, tree, extra, b, d)| common::network(n, &tree, &extra, &b, &d))
    })
}

proptest! {
    #[test]
    fn susceptance_rows_sum_to_zero(net in random_network()) {
        let mats = build_susceptance(&net);
        let ones = DVector::from_element(mats.bus_order.len(), 1.0);
        prop_assert!((&mats.b * &ones).amax() < 1e-10);
        prop_assert!((&mats.b - mats.b.transpose()).amax() == 0.0);
    }

    #[test]
    fn reduced_system_reproduces_kept_angles(net in random_network(), mask in any::<u16>(), seed in any::<u32>()) {
        let mats = build_susceptance(&net);
        let n = mats.bus_order.len();
        // Bus 1 (the reference) always stays; at least one bus is eliminated.
        let mut alpha = vec![BusId(1)];
        let mut beta = Vec::new();
        for k in 2..=n as u32 {
            if mask >> k & 1 == 1 { alpha.push(BusId(k)) } else { beta.push(BusId(k)) }
        }
        prop_assume!(!beta.is_empty());
        let mut p = DVector::from_fn(n, |k, _| ((seed as usize).wrapping_mul(k + 3) % 17) as f64 / 8.0 - 1.0);
        let mean = p.mean();
        p.add_scalar_mut(-mean);
        let (theta, _) = dc_power_flow(&mats, &p, BusId(1)).unwrap();

        let red = kron_reduce(&mats, &alpha, &beta).unwrap();
        let ta = DVector::from_iterator(alpha.len(), mats.positions(&alpha).into_iter().map(|k| theta[k]));
        let folded = red.reduce_injections(&mats, &p);
        prop_assert!((&red.b_tilde * ta - &folded).amax() < 1e-8);
        // Folding only redistributes injections.
        prop_assert!(folded.sum().abs() < 1e-9);
    }

    #[test]
    fn ptdf_flows_match_angle_flows(net in random_network()) {
        let mats = build_susceptance(&net);
        let n = mats.bus_order.len();
        let mut p = DVector::from_fn(n, |k, _| (k as f64 * 0.37).sin());
        let mean = p.mean();
        p.add_scalar_mut(-mean);
        let (_, f) = dc_power_flow(&mats, &p, net.reference_bus).unwrap();
        let h = compute_ptdf(&mats, net.reference_bus).unwrap();
        prop_assert!((h.flows(&p) - f).amax() < 1e-9);
    }
}
