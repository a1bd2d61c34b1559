//! Susceptance matrices, PTDFs and DC power flow.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::case::{BusId, Network};
use crate::linalg::CheckedLu;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("susceptance matrix is singular with the reference bus removed")]
    SingularMatrix,
    #[error("injections do not balance: sum is {mismatch:e}")]
    Unbalanced { mismatch: f64 },
    #[error("bus {0} is not in the network")]
    UnknownBus(BusId),
}

/// `B` (bus × bus) and `Bᴱ` (line × bus). Columns follow `bus_order`,
/// lines follow `line_order` (indices into `Network::branches`).
#[derive(Debug, Clone)]
pub struct SusceptanceMatrices {
    pub b: DMatrix<f64>,
    pub b_line: DMatrix<f64>,
    pub bus_order: Vec<BusId>,
    pub line_order: Vec<usize>,
    position: HashMap<BusId, usize>,
}

impl SusceptanceMatrices {
    pub fn position(&self, id: BusId) -> Option<usize> {
        self.position.get(&id).copied()
    }

    pub fn positions(&self, ids: &[BusId]) -> Vec<usize> {
        ids.iter().map(|id| self.position[id]).collect()
    }
}

pub fn build_susceptance(net: &Network) -> SusceptanceMatrices {
    let n = net.buses.len();
    let bus_order: Vec<BusId> = net.buses.iter().map(|b| b.id).collect();
    let position: HashMap<BusId, usize> = bus_order.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let line_order: Vec<usize> = (0..net.branches.len()).filter(|&k| net.branches[k].in_service).collect();

    let mut b = DMatrix::zeros(n, n);
    let mut b_line = DMatrix::zeros(line_order.len(), n);
    for (row, &k) in line_order.iter().enumerate() {
        let br = &net.branches[k];
        let (u, w, s) = (position[&br.from], position[&br.to], br.susceptance);
        b_line[(row, u)] = s;
        b_line[(row, w)] = -s;
        b[(u, u)] += s;
        b[(w, w)] += s;
        b[(u, w)] -= s;
        b[(w, u)] -= s;
    }
    SusceptanceMatrices { b, b_line, bus_order, line_order, position }
}

/// `H`: line flow per unit injection at each bus, withdrawn at the reference.
#[derive(Debug, Clone)]
pub struct PtdfMatrix {
    pub h: DMatrix<f64>,
    pub reference_bus: BusId,
    pub bus_order: Vec<BusId>,
    pub line_order: Vec<usize>,
}

impl PtdfMatrix {
    pub fn flows(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.h * p
    }
}

/// `Bᴱ B̂⁻¹` with a zero column at `ref_pos`. Shared with the reduced systems.
pub(crate) fn ptdf_dense(
    b: &DMatrix<f64>,
    b_line: &DMatrix<f64>,
    ref_pos: usize,
) -> Result<DMatrix<f64>, NetError> {
    let n = b.nrows();
    let keep: Vec<usize> = (0..n).filter(|&k| k != ref_pos).collect();
    let hat = crate::linalg::submatrix(b, &keep, &keep);
    let lu = CheckedLu::new(hat).ok_or(NetError::SingularMatrix)?;
    // H_keep = Bᴱ_keep B̂⁻¹, computed as (B̂⁻¹ Bᴱ_keepᵀ)ᵀ since B̂ is symmetric.
    let rows: Vec<usize> = (0..b_line.nrows()).collect();
    let be_keep = crate::linalg::submatrix(b_line, &rows, &keep);
    let h_keep = lu.solve(&be_keep.transpose()).transpose();
    let mut h = DMatrix::zeros(b_line.nrows(), n);
    for (j, &col) in keep.iter().enumerate() {
        h.set_column(col, &h_keep.column(j));
    }
    Ok(h)
}

/// Angles with `θ_ref = 0` solving `Bθ = p` on the non-reference rows.
pub(crate) fn angles_dense(b: &DMatrix<f64>, p: &DVector<f64>, ref_pos: usize) -> Result<DVector<f64>, NetError> {
    let n = b.nrows();
    let keep: Vec<usize> = (0..n).filter(|&k| k != ref_pos).collect();
    let lu = CheckedLu::new(crate::linalg::submatrix(b, &keep, &keep)).ok_or(NetError::SingularMatrix)?;
    let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&k| p[k]));
    let sol = lu.solve_vec(&rhs);
    let mut theta = DVector::zeros(n);
    for (j, &k) in keep.iter().enumerate() {
        theta[k] = sol[j];
    }
    Ok(theta)
}

pub fn compute_ptdf(mats: &SusceptanceMatrices, reference: BusId) -> Result<PtdfMatrix, NetError> {
    let r = mats.position(reference).ok_or(NetError::UnknownBus(reference))?;
    Ok(PtdfMatrix {
        h: ptdf_dense(&mats.b, &mats.b_line, r)?,
        reference_bus: reference,
        bus_order: mats.bus_order.clone(),
        line_order: mats.line_order.clone(),
    })
}

/// Solves `p = Bθ` with `θ_ref = 0`; returns `(θ, f = Bᴱθ)`.
pub fn dc_power_flow(
    mats: &SusceptanceMatrices,
    p: &DVector<f64>,
    reference: BusId,
) -> Result<(DVector<f64>, DVector<f64>), NetError> {
    let r = mats.position(reference).ok_or(NetError::UnknownBus(reference))?;
    let mismatch = p.sum();
    if mismatch.abs() > 1e-8 * p.amax().max(1.0) {
        return Err(NetError::Unbalanced { mismatch });
    }
    let theta = angles_dense(&mats.b, p, r)?;
    let f = &mats.b_line * &theta;
    Ok((theta, f))
}

/// A dispatch with its bus injections, angles and flows, all in pu.
#[derive(Debug, Clone, Serialize)]
pub struct DispatchSolution {
    pub g: Vec<f64>,
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
    pub flows: Vec<f64>,
    pub objective: f64,
}

impl DispatchSolution {
    /// Fills `p`, `θ` and `f` from a generator dispatch.
    pub fn from_dispatch(net: &Network, mats: &SusceptanceMatrices, g: Vec<f64>) -> Result<Self, NetError> {
        let p = net.injections(&g);
        let pv = DVector::from_vec(p.clone());
        let r = mats.position(net.reference_bus).ok_or(NetError::UnknownBus(net.reference_bus))?;
        let theta = angles_dense(&mats.b, &pv, r)?;
        let flows = &mats.b_line * &theta;
        Ok(Self {
            objective: net.generation_cost(&g),
            g,
            p,
            theta: theta.iter().copied().collect(),
            flows: flows.iter().copied().collect(),
        })
    }

    /// Largest amount by which any line exceeds its limit (0 if none).
    pub fn max_line_violation(&self, net: &Network, mats: &SusceptanceMatrices) -> f64 {
        line_violation(net, mats, &self.flows)
    }
}

pub fn line_violation(net: &Network, mats: &SusceptanceMatrices, flows: &[f64]) -> f64 {
    mats.line_order
        .iter()
        .zip(flows)
        .map(|(&k, f)| (f.abs() - net.branches[k].flow_limit).max(0.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{Branch, Bus, Network};

    fn triangle() -> Network {
        let bus = |id, r| Bus { id: BusId(id), area_tag: 1, demand: 0.0, is_reference: r };
        let br = |a, b| Branch { from: BusId(a), to: BusId(b), susceptance: 10.0, flow_limit: f64::INFINITY, in_service: true };
        Network::from_parts(100.0, vec![bus(1, true), bus(2, false), bus(3, false)], vec![br(1, 2), br(1, 3), br(2, 3)], vec![]).unwrap()
    }

    #[test]
    fn triangle_matrix_by_hand() {
        let m = build_susceptance(&triangle());
        let expect = DMatrix::from_row_slice(3, 3, &[20.0, -10.0, -10.0, -10.0, 20.0, -10.0, -10.0, -10.0, 20.0]);
        assert_eq!(m.b, expect);
        assert_eq!(m.b_line.row(0).iter().copied().collect::<Vec<_>>(), vec![10.0, -10.0, 0.0]);
    }

    #[test]
    fn reference_column_is_zero() {
        let m = build_susceptance(&triangle());
        let h = compute_ptdf(&m, BusId(2)).unwrap();
        assert!(h.h.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_injection_gives_zero_flow() {
        let m = build_susceptance(&triangle());
        let (t, f) = dc_power_flow(&m, &DVector::zeros(3), BusId(1)).unwrap();
        assert_eq!(t.amax(), 0.0);
        assert_eq!(f.amax(), 0.0);
    }

    #[test]
    fn unbalanced_rejected() {
        let m = build_susceptance(&triangle());
        let p = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(dc_power_flow(&m, &p, BusId(1)), Err(NetError::Unbalanced { .. })));
    }
}
