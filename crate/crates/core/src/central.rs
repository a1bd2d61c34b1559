//! Central DC-OPF solvers used as oracles: the PTDF form with lazily added
//! line limits, and the classic angle form.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::case::Network;
use crate::netmatrix::{build_susceptance, DispatchSolution, NetError, PtdfMatrix};
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpSolution, QpStatus};

/// Relative overload that marks a line as violated in the lazy loop.
pub const LAZY_THRESHOLD: f64 = 1e-6;
pub const MAX_LAZY_ROUNDS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum OpfError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("lazy constraint loop did not settle after {0} rounds")]
    NonConvergentLazyLoop(usize),
    #[error("QP solver stopped at its iteration limit (residual {0:e})")]
    SolverStalled(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

pub(crate) fn accept(sol: QpSolution) -> Result<QpSolution, OpfError> {
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::Infeasible => Err(OpfError::Infeasible),
        QpStatus::MaxIter => Err(OpfError::SolverStalled(sol.kkt_residual)),
    }
}

pub(crate) fn settings(tol: f64) -> QpSettings {
    QpSettings { tol, ..QpSettings::default() }
}

/// Generator-cost part of a QP over `g`: `P = diag(2c₂)`, `q = c₁`.
pub(crate) fn cost_terms(net: &Network) -> (DMatrix<f64>, DVector<f64>, f64) {
    let ng = net.generators.len();
    let p = DMatrix::from_diagonal(&DVector::from_iterator(ng, net.generators.iter().map(|g| 2.0 * g.c2)));
    let q = DVector::from_iterator(ng, net.generators.iter().map(|g| g.c1));
    (p, q, net.generators.iter().map(|g| g.c0).sum())
}

pub(crate) fn generator_bounds(net: &Network) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_iterator(net.generators.len(), net.generators.iter().map(|g| g.pmin)),
        DVector::from_iterator(net.generators.len(), net.generators.iter().map(|g| g.pmax)),
    )
}

/// Minimizes generation cost with flows `H(Mg − d)`. With `lazy`, line limits
/// enter only once violated; the returned dispatch respects every line.
pub fn solve_central_ptdf(net: &Network, ptdf: &PtdfMatrix, lazy: bool, tol: f64) -> Result<DispatchSolution, OpfError> {
    let mats = build_susceptance(net);
    let ng = net.generators.len();
    let nl = ptdf.line_order.len();
    let (p, q, c0) = cost_terms(net);
    let (lo, hi) = generator_bounds(net);

    // Flow sensitivities to each generator and the flows caused by demand.
    let hg = DMatrix::from_fn(nl, ng, |e, k| ptdf.h[(e, mats.position(net.generators[k].bus).unwrap())]);
    let demand = DVector::from_iterator(net.buses.len(), net.buses.iter().map(|b| b.demand));
    let fd = &ptdf.h * demand;

    let limited: Vec<usize> = (0..nl).filter(|&e| net.branches[ptdf.line_order[e]].flow_limit.is_finite()).collect();
    let mut active: BTreeSet<usize> = if lazy { BTreeSet::new() } else { limited.iter().copied().collect() };

    let base = QpProblem::new(p, q)
        .with_offset(c0)
        .with_equalities(DMatrix::from_element(1, ng, 1.0), DVector::from_element(1, net.total_demand()))
        .with_bounds(lo, hi);

    for _ in 0..MAX_LAZY_ROUNDS {
        let rows: Vec<usize> = active.iter().copied().collect();
        let mut a_in = DMatrix::zeros(2 * rows.len(), ng);
        let mut b_in = DVector::zeros(2 * rows.len());
        for (r, &e) in rows.iter().enumerate() {
            let lim = net.branches[ptdf.line_order[e]].flow_limit;
            a_in.row_mut(2 * r).copy_from(&hg.row(e));
            a_in.row_mut(2 * r + 1).copy_from(&(-hg.row(e)));
            b_in[2 * r] = lim + fd[e];
            b_in[2 * r + 1] = lim - fd[e];
        }
        let sol = accept(solve_qp(&base.clone().with_inequalities(a_in, b_in), &settings(tol))?)?;
        let flows = &hg * &sol.x - &fd;
        let fresh: Vec<usize> = limited
            .iter()
            .copied()
            .filter(|e| !active.contains(e))
            .filter(|&e| flows[e].abs() > net.branches[ptdf.line_order[e]].flow_limit * (1.0 + LAZY_THRESHOLD))
            .collect();
        if fresh.is_empty() {
            return Ok(DispatchSolution::from_dispatch(net, &mats, sol.x.iter().copied().collect())?);
        }
        active.extend(fresh);
    }
    Err(OpfError::NonConvergentLazyLoop(MAX_LAZY_ROUNDS))
}

/// Classic formulation over `(θ, g)` with nodal balance `Mg − Bθ = d`.
pub fn solve_central_angle(net: &Network, tol: f64) -> Result<DispatchSolution, OpfError> {
    let mats = build_susceptance(net);
    let n = net.buses.len();
    let ng = net.generators.len();
    let (pg, qg, c0) = cost_terms(net);

    let mut p = DMatrix::zeros(n + ng, n + ng);
    p.view_mut((n, n), (ng, ng)).copy_from(&pg);
    let mut q = DVector::zeros(n + ng);
    q.rows_mut(n, ng).copy_from(&qg);

    let mut a_eq = DMatrix::zeros(n, n + ng);
    a_eq.view_mut((0, 0), (n, n)).copy_from(&(-&mats.b));
    for (k, g) in net.generators.iter().enumerate() {
        a_eq[(mats.position(g.bus).unwrap(), n + k)] = 1.0;
    }
    let b_eq = DVector::from_iterator(n, net.buses.iter().map(|b| b.demand));

    let limited: Vec<usize> =
        (0..mats.line_order.len()).filter(|&e| net.branches[mats.line_order[e]].flow_limit.is_finite()).collect();
    let mut a_in = DMatrix::zeros(2 * limited.len(), n + ng);
    let mut b_in = DVector::zeros(2 * limited.len());
    for (r, &e) in limited.iter().enumerate() {
        let lim = net.branches[mats.line_order[e]].flow_limit;
        a_in.view_mut((2 * r, 0), (1, n)).copy_from(&mats.b_line.row(e));
        a_in.view_mut((2 * r + 1, 0), (1, n)).copy_from(&(-mats.b_line.row(e)));
        b_in[2 * r] = lim;
        b_in[2 * r + 1] = lim;
    }

    let (lo, hi) = generator_bounds(net);
    let mut lower = DVector::from_element(n + ng, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n + ng, f64::INFINITY);
    let r = mats.position(net.reference_bus).unwrap();
    lower[r] = 0.0;
    upper[r] = 0.0;
    lower.rows_mut(n, ng).copy_from(&lo);
    upper.rows_mut(n, ng).copy_from(&hi);

    let prob = QpProblem::new(p, q)
        .with_offset(c0)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in)
        .with_bounds(lower, upper);
    let sol = accept(solve_qp(&prob, &settings(tol))?)?;
    Ok(DispatchSolution::from_dispatch(net, &mats, sol.x.rows(n, ng).iter().copied().collect())?)
}
