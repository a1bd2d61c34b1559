//! Kron-reduced area systems, their accompanying matrices, and local PTDFs.
//!
//! For kept buses α and eliminated buses β,
//! `A = −B^{αβ}(B^{ββ})⁻¹` folds eliminated injections onto kept buses and
//! `B̃ = B^{αα} + A B^{βα}` is the reduced susceptance matrix, so that
//! `p^α + A p^β = B̃ θ^α`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::case::{BusId, Network};
use crate::linalg::{submatrix, CheckedLu};
use crate::netmatrix::{ptdf_dense, NetError, PtdfMatrix, SusceptanceMatrices};
use crate::partition::{AreaId, AreaTopology, Partition};
use crate::runtime::{self, Agent, Blob, Budget, Coordinator, MessageKind, RoundMessage};

#[derive(Debug, Error, PartialEq)]
pub enum KronError {
    #[error("eliminated block B^ββ is singular")]
    SingularEliminatedBlock,
    #[error("reduced matrix is singular with the reference bus removed")]
    SingularMatrix,
    #[error("bus {0} is not part of the reduced system")]
    NotInReducedSystem(BusId),
    #[error("WLS update matrix could not be factored for area {0}")]
    SingularUpdate(AreaId),
    #[error(transparent)]
    Runtime(#[from] runtime::RuntimeError),
}

#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub alpha: Vec<BusId>,
    pub beta: Vec<BusId>,
    pub b_tilde: DMatrix<f64>,
    /// `|α| × |β|`.
    pub accompanying: DMatrix<f64>,
}

impl ReducedSystem {
    /// Builds `B̃ = B^{αα} + A B^{βα}` around a given accompanying matrix.
    pub fn from_accompanying(mats: &SusceptanceMatrices, alpha: &[BusId], beta: &[BusId], a: DMatrix<f64>) -> Self {
        let (ia, ib) = (mats.positions(alpha), mats.positions(beta));
        let mut b_tilde = submatrix(&mats.b, &ia, &ia);
        if !beta.is_empty() {
            b_tilde += &a * submatrix(&mats.b, &ib, &ia);
        }
        Self { alpha: alpha.to_vec(), beta: beta.to_vec(), b_tilde, accompanying: a }
    }

    pub fn alpha_position(&self, bus: BusId) -> Option<usize> {
        self.alpha.binary_search(&bus).ok()
    }

    pub fn beta_position(&self, bus: BusId) -> Option<usize> {
        self.beta.binary_search(&bus).ok()
    }

    /// `p^α + A p^β` for a full injection vector indexed like `mats`.
    pub fn reduce_injections(&self, mats: &SusceptanceMatrices, p: &DVector<f64>) -> DVector<f64> {
        let pa = DVector::from_iterator(self.alpha.len(), mats.positions(&self.alpha).into_iter().map(|k| p[k]));
        if self.beta.is_empty() {
            return pa;
        }
        let pb = DVector::from_iterator(self.beta.len(), mats.positions(&self.beta).into_iter().map(|k| p[k]));
        pa + &self.accompanying * pb
    }
}

/// Direct Gaussian elimination of `beta`. Both sets must be sorted.
pub fn kron_reduce(mats: &SusceptanceMatrices, alpha: &[BusId], beta: &[BusId]) -> Result<ReducedSystem, KronError> {
    if beta.is_empty() {
        return Ok(ReducedSystem::from_accompanying(mats, alpha, beta, DMatrix::zeros(alpha.len(), 0)));
    }
    let (ia, ib) = (mats.positions(alpha), mats.positions(beta));
    let lu = CheckedLu::new(submatrix(&mats.b, &ib, &ib)).ok_or(KronError::SingularEliminatedBlock)?;
    // A = −B^{αβ}(B^{ββ})⁻¹ = −((B^{ββ})⁻¹ B^{βα})ᵀ by symmetry.
    let mut a = -lu.solve(&submatrix(&mats.b, &ib, &ia)).transpose();
    a.apply(|v| *v += 0.0); // no negative zeros in reports

    Ok(ReducedSystem::from_accompanying(mats, alpha, beta, a))
}

/// Columns of `B^{ββ}` and `B^{αβ}` belonging to one external area.
#[derive(Debug, Clone)]
pub struct WlsBlock {
    pub area: AreaId,
    /// Positions within β of this area's buses.
    pub columns: Vec<usize>,
    /// `|β| × |columns|`.
    pub b_bb: DMatrix<f64>,
    /// `|α| × |columns|`.
    pub b_ab: DMatrix<f64>,
}

/// Splits area `topo`'s elimination problem by owning area. Areas with no
/// eliminated buses get no block.
pub fn wls_blocks(mats: &SusceptanceMatrices, topo: &AreaTopology, part: &Partition) -> Vec<WlsBlock> {
    let (ia, ib) = (mats.positions(&topo.alpha), mats.positions(&topo.beta));
    part.areas
        .iter()
        .filter(|&&a| a != topo.area)
        .filter_map(|&a| {
            let columns: Vec<usize> = (0..topo.beta.len()).filter(|&k| part.area_of[&topo.beta[k]] == a).collect();
            if columns.is_empty() {
                return None;
            }
            let cols: Vec<usize> = columns.iter().map(|&k| ib[k]).collect();
            Some(WlsBlock { area: a, b_bb: submatrix(&mats.b, &ib, &cols), b_ab: submatrix(&mats.b, &ia, &cols), columns })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WlsConfig {
    /// Penalty on the Jacobi-scaled system, where `B^{ββ}` has unit diagonal.
    pub rho: f64,
    /// Bound on the squared Frobenius residuals of the scaled system.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for WlsConfig {
    fn default() -> Self {
        Self { rho: 0.01, tol: 1e-12, max_iter: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WlsTraceRow {
    pub iteration: usize,
    /// max over areas of `‖Q_a − Q‖²_F`.
    pub consensus: f64,
    /// max over areas of `‖Q_a B^{ββ}_a + B^{αβ}_a‖²_F`.
    pub fit: f64,
}

/// Final iterates of the consensus, in unscaled units, one entry per
/// external area in block order.
#[derive(Debug, Clone)]
pub struct WlsState {
    pub q: DMatrix<f64>,
    pub q_a: Vec<DMatrix<f64>>,
    pub lambda_a: Vec<DMatrix<f64>>,
    pub rho: f64,
    /// `‖Q_a − Q‖_F`.
    pub consensus: Vec<f64>,
    /// `‖Q_a B^{ββ}_a + B^{αβ}_a‖_F`.
    pub fit: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WlsOutcome {
    pub accompanying: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<WlsTraceRow>,
    pub state: WlsState,
    pub parallel_seconds: f64,
}

/// One external area's side of the least-squares consensus. It only ever
/// holds its own columns.
struct WlsAgent {
    id: usize,
    block: WlsBlock,
    /// Unscaled blocks, only used for the reported residuals.
    raw: WlsBlock,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// `−B^{αβ}_a (B^{ββ}_a)ᵀ`, fixed.
    target: DMatrix<f64>,
    q_a: DMatrix<f64>,
    lambda: DMatrix<f64>,
    rho: f64,
}

impl WlsAgent {
    /// `scale` is the symmetric Jacobi scaling over all of β. The agent
    /// works with `Q' = Q S⁻¹` on `S B^{ββ}_a D_a`, which has the same
    /// solution as the unscaled system.
    fn new(id: usize, mut block: WlsBlock, alpha_len: usize, rho: f64, scale: &DVector<f64>) -> Result<Self, KronError> {
        let beta_len = block.b_bb.nrows();
        let raw = block.clone();
        for (j, &k) in block.columns.iter().enumerate() {
            block.b_bb.column_mut(j).component_mul_assign(scale);
            block.b_bb.column_mut(j).scale_mut(scale[k]);
            block.b_ab.column_mut(j).scale_mut(scale[k]);
        }
        let gram = &block.b_bb * block.b_bb.transpose() + DMatrix::identity(beta_len, beta_len) * (rho / 2.0);
        let chol = gram.cholesky().ok_or(KronError::SingularUpdate(block.area))?;
        let target = -&block.b_ab * block.b_bb.transpose();
        Ok(Self {
            id,
            block,
            raw,
            chol,
            target,
            q_a: DMatrix::zeros(alpha_len, beta_len),
            lambda: DMatrix::zeros(alpha_len, beta_len),
            rho,
        })
    }
}

impl Agent for WlsAgent {
    fn step(&mut self, round: usize, inbox: Option<&RoundMessage>) -> Result<RoundMessage, String> {
        let q = match inbox {
            Some(m) => {
                let q = m.payload.to_matrix();
                self.lambda += (&self.q_a - &q) * self.rho;
                q
            }
            None => DMatrix::zeros(self.q_a.nrows(), self.q_a.ncols()),
        };
        // Q_a (B_a B_aᵀ + ρ/2 I) = −B^{αβ}_a B_aᵀ − λ_a/2 + ρ/2 Q
        let rhs = &self.target - &self.lambda * 0.5 + q * (self.rho / 2.0);
        self.q_a = self.chol.solve(&rhs.transpose()).transpose();
        let fit = (&self.q_a * &self.block.b_bb + &self.block.b_ab).norm_squared();
        Ok(RoundMessage::new(self.id, round, MessageKind::QShare, Blob::matrix(&self.q_a)).with_stats(vec![fit]))
    }
}

struct WlsCoordinator {
    tol: f64,
    shape: (usize, usize),
    trace: Vec<WlsTraceRow>,
    q: DMatrix<f64>,
}

impl Coordinator for WlsCoordinator {
    fn should_stop(&mut self, _: usize, _: Option<&RoundMessage>) -> bool {
        self.trace.last().is_some_and(|t| t.consensus <= self.tol && t.fit <= self.tol)
    }

    fn reduce(&mut self, round: usize, messages: &[RoundMessage]) -> Result<RoundMessage, String> {
        let mats: Vec<DMatrix<f64>> = messages.iter().map(|m| m.payload.to_matrix()).collect();
        let mut q = DMatrix::zeros(self.shape.0, self.shape.1);
        for m in &mats {
            q += m;
        }
        q /= mats.len() as f64;
        let consensus = mats.iter().map(|m| (m - &q).norm_squared()).fold(0.0, f64::max);
        let fit = messages.iter().map(|m| m.stats[0]).fold(0.0, f64::max);
        self.trace.push(WlsTraceRow { iteration: round + 1, consensus, fit });
        let out = RoundMessage::new(RoundMessage::COORDINATOR, round, MessageKind::QShare, Blob::matrix(&q));
        self.q = q;
        Ok(out)
    }
}

/// Computes the accompanying matrix by consensus ADMM over the external
/// areas' column blocks. A run that hits `max_iter` returns its last
/// iterate with `converged = false`.
pub fn wls_accompanying(
    blocks: Vec<WlsBlock>,
    alpha_len: usize,
    beta_len: usize,
    cfg: &WlsConfig,
) -> Result<WlsOutcome, KronError> {
    if blocks.is_empty() || beta_len == 0 {
        let q = DMatrix::zeros(alpha_len, beta_len);
        return Ok(WlsOutcome {
            accompanying: q.clone(),
            converged: true,
            iterations: 0,
            trace: Vec::new(),
            state: WlsState { q, q_a: Vec::new(), lambda_a: Vec::new(), rho: cfg.rho, consensus: Vec::new(), fit: Vec::new() },
            parallel_seconds: 0.0,
        });
    }
    // Each area contributes the self-susceptances of the buses it owns.
    let mut scale = DVector::from_element(beta_len, 1.0);
    for b in &blocks {
        for (j, &k) in b.columns.iter().enumerate() {
            scale[k] = 1.0 / b.b_bb[(k, j)].abs().sqrt();
        }
    }
    let agents = blocks
        .into_iter()
        .enumerate()
        .map(|(id, b)| WlsAgent::new(id, b, alpha_len, cfg.rho, &scale))
        .collect::<Result<Vec<_>, _>>()?;
    let mut coord = WlsCoordinator {
        tol: cfg.tol,
        shape: (alpha_len, beta_len),
        trace: Vec::new(),
        q: DMatrix::zeros(alpha_len, beta_len),
    };
    let out = runtime::run_rounds(agents, &mut coord, Budget::rounds(cfg.max_iter))?;
    let unscale = |m: &DMatrix<f64>, f: &dyn Fn(f64) -> f64| {
        let mut m = m.clone();
        for (k, mut col) in m.column_iter_mut().enumerate() {
            col.scale_mut(f(scale[k]));
        }
        m
    };
    let accompanying = unscale(&coord.q, &|s| s);
    let q_a: Vec<DMatrix<f64>> = out.agents.iter().map(|a| unscale(&a.q_a, &|s| s)).collect();
    let state = WlsState {
        consensus: q_a.iter().map(|m| (m - &accompanying).norm()).collect(),
        fit: q_a.iter().zip(&out.agents).map(|(m, a)| (m * &a.raw.b_bb + &a.raw.b_ab).norm()).collect(),
        lambda_a: out.agents.iter().map(|a| unscale(&a.lambda, &|s| 1.0 / s)).collect(),
        q_a,
        q: accompanying.clone(),
        rho: cfg.rho,
    };
    Ok(WlsOutcome {
        accompanying,
        converged: out.stop == runtime::StopReason::Predicate,
        iterations: out.rounds,
        trace: coord.trace,
        state,
        parallel_seconds: out.parallel_seconds,
    })
}

/// Local PTDF over `lines × α`: `Bᴱ` of those lines restricted to α,
/// times the inverse of `B̃` with the reference removed.
pub fn local_ptdf(
    red: &ReducedSystem,
    net: &Network,
    lines: &[usize],
    reference: BusId,
) -> Result<PtdfMatrix, KronError> {
    let r = red.alpha_position(reference).ok_or(KronError::NotInReducedSystem(reference))?;
    let mut be = DMatrix::zeros(lines.len(), red.alpha.len());
    for (row, &k) in lines.iter().enumerate() {
        let br = &net.branches[k];
        let u = red.alpha_position(br.from).ok_or(KronError::NotInReducedSystem(br.from))?;
        let w = red.alpha_position(br.to).ok_or(KronError::NotInReducedSystem(br.to))?;
        be[(row, u)] = br.susceptance;
        be[(row, w)] = -br.susceptance;
    }
    let h = ptdf_dense(&red.b_tilde, &be, r).map_err(|e| match e {
        NetError::SingularMatrix => KronError::SingularMatrix,
        _ => unreachable!("ptdf_dense only fails on singularity"),
    })?;
    Ok(PtdfMatrix { h, reference_bus: reference, bus_order: red.alpha.clone(), line_order: lines.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{Branch, Bus};
    use crate::netmatrix::build_susceptance;

    fn triangle() -> Network {
        let bus = |id, r| Bus { id: BusId(id), area_tag: 1, demand: 0.0, is_reference: r };
        let br = |a, b| Branch { from: BusId(a), to: BusId(b), susceptance: 10.0, flow_limit: f64::INFINITY, in_service: true };
        Network::from_parts(100.0, vec![bus(1, true), bus(2, false), bus(3, false)], vec![br(1, 2), br(1, 3), br(2, 3)], vec![]).unwrap()
    }

    #[test]
    fn empty_beta_is_identity_reduction() {
        let m = build_susceptance(&triangle());
        let ids = [BusId(1), BusId(2), BusId(3)];
        let r = kron_reduce(&m, &ids, &[]).unwrap();
        assert_eq!(r.b_tilde, m.b);
        assert_eq!(r.accompanying.ncols(), 0);
    }

    #[test]
    fn identity_blocks_give_negated_coupling() {
        let b_ab = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let block = WlsBlock { area: AreaId(2), columns: vec![0, 1], b_bb: DMatrix::identity(2, 2), b_ab: b_ab.clone() };
        let cfg = WlsConfig { tol: 1e-16, ..WlsConfig::default() };
        let out = wls_accompanying(vec![block], 2, 2, &cfg).unwrap();
        assert!(out.converged);
        assert!((out.accompanying + b_ab).norm() < 1e-6);
    }
}
