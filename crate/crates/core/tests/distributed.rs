mod common;

use std::collections::BTreeSet;

use nalgebra::DVector;
use proptest::prelude::*;
use ptdf_admm::central::{solve_central_angle, solve_central_ptdf};
use ptdf_admm::dist::{
    build_agent_model, check_consistency, decompose, decompose_injections, project_z, recover_global_angles,
    run_distributed_ptdf, solve_subproblem, AdmmState, DistConfig, DistError, FictitiousBound, Sensitivity, ZetaCase,
};
use ptdf_admm::kron::{kron_reduce, local_ptdf, wls_accompanying, wls_blocks, WlsConfig};
use ptdf_admm::netmatrix::{build_susceptance, compute_ptdf};
use ptdf_admm::partition::{build_area_topology, partition_fallback, partition_from_areas, Partition};
use ptdf_admm::{AreaId, BusId};

fn direct() -> DistConfig {
    DistConfig { sensitivity: Sensitivity::Direct, ..DistConfig::default() }
}

#[test]
fn zeta_cases_on_three_areas() {
    let net = common::load("tiny5");
    let part = partition_from_areas(&net).unwrap();
    let dec = decompose(&net, &part, &direct()).unwrap();
    let pairs = &dec.models[0].topology.shared.pairs;
    // Bus 2 seen from area 2: internal to area 1, boundary of area 2, hidden from area 3.
    let k = pairs.iter().position(|p| p.bus == BusId(2) && p.boundary_of == AreaId(2)).unwrap();
    assert_eq!(dec.models[0].zeta_cases[k], ZetaCase::Inside);
    assert_eq!(dec.models[1].zeta_cases[k], ZetaCase::Boundary);
    assert_eq!(dec.models[2].zeta_cases[k], ZetaCase::Other);
    // An Other row weighs area 3's own injections by how area 2 folds them
    // into bus 2. Area 2 eliminates bus 4 but keeps bus 5 (a tie-line end),
    // and fictitious injections at area 3's boundary never enter.
    let m3 = &dec.models[2];
    let coeff = |b: u32| m3.zeta_coeffs[(k, m3.reduced.alpha_position(BusId(b)).unwrap())];
    assert_eq!(coeff(1), 0.0);
    assert_eq!(coeff(3), 0.0);
    assert!(coeff(4) > 0.0);
    assert_eq!(coeff(5), 0.0);
}

#[test]
fn single_area_subproblem_is_the_central_problem() {
    let net = common::load("tiny5");
    let part = Partition::new(net.buses.iter().map(|b| (b.id, AreaId(1))).collect());
    let mats = build_susceptance(&net);
    let topo = build_area_topology(&net, &part, net.reference_bus).unwrap().remove(0);
    let red = kron_reduce(&mats, &topo.alpha, &topo.beta).unwrap();
    let h = local_ptdf(&red, &net, &topo.local_lines, net.reference_bus).unwrap();
    let model = build_agent_model(&net, &topo, red, h, &[], FictitiousBound::Unbounded).unwrap();
    let active: BTreeSet<usize> = (0..topo.local_lines.len()).collect();
    let sol = solve_subproblem(&model, &AdmmState::new(0, 1000.0), &active, &mut None, &Default::default()).unwrap();
    let central = solve_central_angle(&net, 1e-9).unwrap();
    assert!((sol.cost - central.objective).abs() <= 1e-6 * central.objective, "{} vs {}", sol.cost, central.objective);
    assert_eq!(run_distributed_ptdf(&net, &part, &direct()).unwrap_err(), DistError::SingleArea);
}

/// The exact central dispatch, pushed through each area's reduction, is
/// consistent and stitches back into the same angles.
fn round_trip(name: &str, cfg: &DistConfig, theta_tol: f64) -> (f64, f64, f64) {
    let net = common::load(name);
    let part = common::default_partition(&net);
    let dec = decompose(&net, &part, cfg).unwrap();
    let sol = solve_central_angle(&net, 1e-9).unwrap();
    let inj = decompose_injections(&net, &dec.models, &sol.p);
    let rec = recover_global_angles(&net, &dec.models, &inj).unwrap();
    let theta_err = rec.theta.iter().zip(&sol.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(theta_err < theta_tol, "{name}: {theta_err}");
    (check_consistency(&dec.models, &inj), rec.disagreement, rec.residual)
}

#[test]
fn exact_solution_round_trip() {
    for name in ["tiny2", "tiny3", "tiny5", common::PGLIB73] {
        let (c, d, r) = round_trip(name, &direct(), 1e-8);
        assert!(c < 1e-9 && d < 1e-9 && r < 1e-8, "{name}: {c} {d} {r}");
    }
}

#[test]
fn round_trip_with_distributed_sensitivities() {
    let (c, d, r) = round_trip("tiny5", &DistConfig::default(), 1e-6);
    assert!(c < 1e-6 && d < 1e-6 && r < 1e-6, "{c} {d} {r}");
}

#[test]
fn triangle_converges_to_the_central_cost() {
    let net = common::load("tiny3");
    let part = partition_from_areas(&net).unwrap();
    let r = run_distributed_ptdf(&net, &part, &DistConfig::default()).unwrap();
    assert!(r.converged);
    assert!(r.iterations < 500, "{}", r.iterations);
    assert!((r.objective - 2253.0).abs() < 1e-2 * 2253.0 / 100.0, "{}", r.objective);
    assert!(r.max_line_violation <= 1e-4);
    assert!(r.angle_disagreement <= 1e-2);
    let last = r.trace.last().unwrap();
    assert!(last.primal_residual <= 1e-3 && last.dual_residual <= 1e-3);
    // Residuals trend down: the tail is far below the start.
    assert!(r.trace[0].primal_residual > 10.0 * last.primal_residual);
}

#[test]
fn every_multi_area_fixture_converges() {
    for name in ["tiny2", "tiny5", common::PGLIB73] {
        let net = common::load(name);
        let part = partition_from_areas(&net).unwrap();
        let r = run_distributed_ptdf(&net, &part, &DistConfig::default()).unwrap();
        assert!(r.converged, "{name}");
        assert!(r.relative_gap_pct <= 0.1, "{name}: {}", r.relative_gap_pct);
        assert!(r.max_line_violation <= 1e-4, "{name}");
        assert!(r.max_zero_sum <= 1e-12, "{name}");
    }
}

#[test]
fn lazy_and_full_constraint_sets_agree() {
    let net = common::load("tiny5");
    let part = partition_from_areas(&net).unwrap();
    let lazy = run_distributed_ptdf(&net, &part, &DistConfig::default()).unwrap();
    let full = run_distributed_ptdf(&net, &part, &DistConfig { lazy: false, ..DistConfig::default() }).unwrap();
    assert!((lazy.objective - full.objective).abs() <= 1e-3 * full.objective);
    let h = compute_ptdf(&build_susceptance(&net), net.reference_bus).unwrap();
    let central = solve_central_ptdf(&net, &h, true, 1e-9).unwrap();
    assert!((lazy.central_objective - central.objective).abs() <= 1e-6 * central.objective);
}

proptest! {
    #[test]
    fn projection_sums_to_zero(v in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 2..6)) {
        let zetas: Vec<DVector<f64>> = v.into_iter().map(DVector::from_vec).collect();
        let z = project_z(&zetas);
        let mut sum = DVector::zeros(6);
        for zi in &z {
            sum += zi;
        }
        prop_assert!(sum.amax() <= 1e-9);
        // Projection is idempotent.
        let again = project_z(&z);
        for (a, b) in again.iter().zip(&z) {
            prop_assert!((a - b).amax() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wls_matches_direct_elimination(
        n in 6usize..12,
        tree in prop::collection::vec(0usize..100, 11),
        extra in prop::collection::vec((0usize..100, 0usize..100), 0..6),
        b in prop::collection::vec(2.0f64..20.0, 1..8),
        seed in 0u64..50,
    ) {
        let net = common::network(n, &tree[..n - 1], &extra, &b, &vec![0.0; n]);
        let part = partition_fallback(&net, 3, seed).unwrap();
        let mats = build_susceptance(&net);
        for topo in build_area_topology(&net, &part, net.reference_bus).unwrap() {
            if topo.beta.is_empty() {
                continue;
            }
            let want = kron_reduce(&mats, &topo.alpha, &topo.beta).unwrap().accompanying;
            let out = wls_accompanying(wls_blocks(&mats, &topo, &part), topo.alpha.len(), topo.beta.len(), &WlsConfig::default()).unwrap();
            prop_assert!(out.converged);
            prop_assert!((&out.accompanying - &want).norm() <= 1e-4 * (1.0 + want.norm()));
        }
    }
}
