mod common;

use nalgebra::DVector;
use ptdf_admm::baseline::{build_angle_models, run_distributed_angle, tie_lines, ENTRIES_PER_TIE};
use ptdf_admm::dist::DistConfig;
use ptdf_admm::partition::partition_from_areas;
use ptdf_admm::qp::{solve_qp, QpSettings};

#[test]
fn every_tie_quantity_has_two_copies() {
    let net = common::load("tiny5");
    let part = partition_from_areas(&net).unwrap();
    let ties = tie_lines(&net, &part);
    assert_eq!(ties, vec![1, 2, 4]);
    let models = build_angle_models(&net, &part);
    let mut count = vec![0; ties.len() * ENTRIES_PER_TIE];
    for m in &models {
        for &(entry, var) in &m.shared {
            count[entry] += 1;
            assert!(var < m.n_vars());
        }
    }
    assert!(count.iter().all(|&c| c == 2), "{count:?}");
}

#[test]
fn local_problems_are_feasible_on_their_own() {
    let net = common::load("tiny5");
    let part = partition_from_areas(&net).unwrap();
    for m in build_angle_models(&net, &part) {
        let sol = solve_qp(&m.problem, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, ptdf_admm::qp::QpStatus::Optimal, "area {}", m.area);
        assert!(m.cost(&sol.x).is_finite());
        assert_eq!(m.cost(&DVector::zeros(m.n_vars())), m.problem.c0);
    }
}

#[test]
fn small_cases_reach_the_central_cost() {
    for name in ["tiny2", "tiny3", "tiny5"] {
        let net = common::load(name);
        let part = partition_from_areas(&net).unwrap();
        let r = run_distributed_angle(&net, &part, &DistConfig::default()).unwrap();
        assert_eq!(r.method, "angle");
        assert!(r.converged, "{name}");
        assert!(r.relative_gap_pct <= 0.1, "{name}: {}", r.relative_gap_pct);
        assert!(r.consistency_violation <= 1e-2, "{name}");
        assert!(r.max_line_violation <= 1e-3, "{name}: {}", r.max_line_violation);
        assert_eq!(r.offline_seconds, 0.0);
    }
}
