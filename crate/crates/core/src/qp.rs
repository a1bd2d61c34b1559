//! Dense convex QP solver.
//!
//! Solves `min ½xᵀPx + qᵀx + c0` subject to `Aeq x = beq`, `Ain x ≤ bin` and
//! `lower ≤ x ≤ upper` by operator splitting on the stacked form
//! `l ≤ Ax ≤ u`: a regularized linear solve for `x`, a projection for `z`,
//! and a dual ascent step. Data are Ruiz-equilibrated, the penalty is
//! rebalanced from the residual ratio, and near-converged iterates are
//! polished by solving the KKT system of the guessed active set.
//!
//! Multiplier sign convention: `Px + q + Aeqᵀy_eq + Ainᵀy_in + y_bound = 0`,
//! with `y_in ≥ 0` and `y_bound` positive at upper and negative at lower bounds.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::linalg::inf_norm;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c0: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            c0: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_offset(mut self, c0: f64) -> Self {
        self.c0 = c0;
        self
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + self.c0
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let bad = |s: &str| Err(QpError::InvalidProblem(s.to_string()));
        if self.p.shape() != (n, n) {
            return bad("P must be n × n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality system has inconsistent dimensions");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality system has inconsistent dimensions");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds must have length n");
        }
        let scale = self.p.amax().max(1.0);
        if (&self.p - self.p.transpose()).amax() > 1e-12 * scale {
            return bad("P is not symmetric");
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u) {
            return bad("lower bound above upper bound");
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.q) || !finite(&self.b_eq) || self.b_in.iter().any(|x| x.is_nan()) || !self.p.iter().all(|x| x.is_finite()) {
            return bad("non-finite data");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// max of the primal and stationarity residuals (∞-norm).
    pub kkt_residual: f64,
    pub iterations: usize,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub bound_duals: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Absolute and relative residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub adapt_interval: usize,
    pub check_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            adapt_interval: 50,
            check_interval: 25,
            polish: true,
        }
    }
}

pub fn solve_qp(prob: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    Ok(QpWorkspace::new(prob.clone(), *settings)?.solve())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Row {
    Eq(usize),
    In(usize),
    Bound(usize),
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const MAX_RHO_UPDATES: usize = 10;
const EQ_RHO_FACTOR: f64 = 1e3;

/// Scaled problem plus solver state, reusable across solves that change
/// only the linear cost.
pub struct QpWorkspace {
    prob: QpProblem,
    settings: QpSettings,
    rows: Vec<Row>,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    at: DMatrix<f64>,
    q: DVector<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    rho: f64,
    rho_vec: DVector<f64>,
    kkt: Cholesky<f64, Dyn>,
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

fn clamp_norm(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

fn project(v: f64, l: f64, u: f64) -> f64 {
    v.max(l).min(u)
}

impl QpWorkspace {
    pub fn new(prob: QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        prob.validate()?;
        let n = prob.n();
        let mut rows = Vec::new();
        let mut raw_l = Vec::new();
        let mut raw_u = Vec::new();
        for i in 0..prob.b_eq.len() {
            rows.push(Row::Eq(i));
            raw_l.push(prob.b_eq[i]);
            raw_u.push(prob.b_eq[i]);
        }
        for i in 0..prob.b_in.len() {
            if prob.b_in[i] < f64::INFINITY {
                rows.push(Row::In(i));
                raw_l.push(f64::NEG_INFINITY);
                raw_u.push(prob.b_in[i]);
            }
        }
        for j in 0..n {
            if prob.lower[j].is_finite() || prob.upper[j].is_finite() {
                rows.push(Row::Bound(j));
                raw_l.push(prob.lower[j]);
                raw_u.push(prob.upper[j]);
            }
        }
        let m = rows.len();
        let mut a = DMatrix::zeros(m, n);
        for (r, row) in rows.iter().enumerate() {
            match *row {
                Row::Eq(i) => a.row_mut(r).copy_from(&prob.a_eq.row(i)),
                Row::In(i) => a.row_mut(r).copy_from(&prob.a_in.row(i)),
                Row::Bound(j) => a[(r, j)] = 1.0,
            }
        }

        // Ruiz equilibration of [P Aᵀ; A 0].
        let mut p = prob.p.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        for _ in 0..15 {
            let dd = DVector::from_fn(n, |j, _| {
                let col = p.column(j).amax().max(if m > 0 { a.column(j).amax() } else { 0.0 });
                1.0 / clamp_norm(col).sqrt()
            });
            let ee = DVector::from_fn(m, |i, _| 1.0 / clamp_norm(a.row(i).amax()).sqrt());
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    a[(i, j)] *= ee[i] * dd[j];
                }
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&ee);
        }
        let qd = prob.q.component_mul(&d);
        let mean_col = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
        let c = 1.0 / clamp_norm(mean_col.max(inf_norm(&qd)));
        p *= c;

        let l = DVector::from_fn(m, |i, _| raw_l[i] * e[i]);
        let u = DVector::from_fn(m, |i, _| raw_u[i] * e[i]);
        let rho = settings.rho;
        let rho_vec = Self::rho_vector(&l, &u, rho);
        let at = a.transpose();
        let kkt = Self::factor(&p, &a, &at, &rho_vec, settings.sigma);
        Ok(Self {
            q: qd * c,
            prob,
            settings,
            rows,
            p,
            at,
            a,
            l,
            u,
            d,
            e,
            c,
            rho,
            rho_vec,
            kkt,
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
        })
    }

    fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
        DVector::from_fn(l.len(), |i, _| if l[i] == u[i] { rho * EQ_RHO_FACTOR } else { rho })
    }

    fn factor(p: &DMatrix<f64>, a: &DMatrix<f64>, at: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Cholesky<f64, Dyn> {
        let n = p.nrows();
        let mut k = p + DMatrix::identity(n, n) * sigma;
        if a.nrows() > 0 {
            let mut ra = a.clone();
            for (i, mut row) in ra.row_iter_mut().enumerate() {
                row *= rho[i];
            }
            k += at * ra;
        }
        let mut reg = 0.0;
        loop {
            let mut kk = k.clone();
            for i in 0..n {
                kk[(i, i)] += reg;
            }
            if let Some(ch) = kk.cholesky() {
                return ch;
            }
            reg = if reg == 0.0 { 1e-10 * k.amax().max(1.0) } else { reg * 100.0 };
        }
    }

    pub fn problem(&self) -> &QpProblem {
        &self.prob
    }

    /// Replaces the linear cost, keeping factorization and warm start.
    pub fn update_linear(&mut self, q: DVector<f64>) {
        assert_eq!(q.len(), self.prob.n());
        self.q = q.component_mul(&self.d) * self.c;
        self.prob.q = q;
    }

    pub fn update_offset(&mut self, c0: f64) {
        self.prob.c0 = c0;
    }

    fn set_rho(&mut self, rho: f64) {
        self.rho = rho.clamp(RHO_MIN, RHO_MAX);
        self.rho_vec = Self::rho_vector(&self.l, &self.u, self.rho);
        self.kkt = Self::factor(&self.p, &self.a, &self.at, &self.rho_vec, self.settings.sigma);
    }

    /// Unscaled primal/dual residuals and their tolerances.
    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (f64, f64, f64, f64) {
        let tol = self.settings.tol;
        let ax = &self.a * x;
        let einv = self.e.map(|v| 1.0 / v);
        let dinv = self.d.map(|v| 1.0 / v);
        let prim = inf_norm(&(&ax - z).component_mul(&einv));
        let eps_p = tol + tol * inf_norm(&ax.component_mul(&einv)).max(inf_norm(&z.component_mul(&einv)));
        let px = &self.p * x;
        let aty = &self.at * y;
        let cinv = 1.0 / self.c;
        let dual = cinv * inf_norm(&(&px + &self.q + &aty).component_mul(&dinv));
        let scale = inf_norm(&px.component_mul(&dinv))
            .max(inf_norm(&aty.component_mul(&dinv)))
            .max(inf_norm(&self.q.component_mul(&dinv)));
        let eps_d = tol + tol * cinv * scale;
        (prim, dual, eps_p, eps_d)
    }

    fn infeasibility_certificate(&self, dy: &DVector<f64>) -> bool {
        let norm = inf_norm(&dy.component_mul(&self.e.map(|v| 1.0 / v)));
        if norm < 1e-12 {
            return false;
        }
        let eps = 1e-6 * norm;
        let dinv = self.d.map(|v| 1.0 / v);
        if inf_norm(&(&self.at * dy).component_mul(&dinv)) > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let v = dy[i];
            if v > 0.0 {
                if self.u[i].is_infinite() {
                    if v > 1e-9 * norm {
                        return false;
                    }
                } else {
                    support += self.u[i] * v;
                }
            } else if v < 0.0 {
                if self.l[i].is_infinite() {
                    if v < -1e-9 * norm {
                        return false;
                    }
                } else {
                    support += self.l[i] * v;
                }
            }
        }
        support < -eps
    }

    /// Solves the equality-constrained system of the guessed active set.
    fn polish(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.x.len();
        let m = self.z.len();
        let mut active = Vec::new();
        let mut target = Vec::new();
        for i in 0..m {
            if self.l[i] == self.u[i] {
                active.push(i);
                target.push(self.l[i]);
            } else if self.z[i] - self.l[i] < -self.y[i] {
                active.push(i);
                target.push(self.l[i]);
            } else if self.u[i] - self.z[i] < self.y[i] {
                active.push(i);
                target.push(self.u[i]);
            }
        }
        let k = active.len();
        let dim = n + k;
        let delta = 1e-7;
        let mut exact = DMatrix::zeros(dim, dim);
        exact.view_mut((0, 0), (n, n)).copy_from(&self.p);
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                exact[(n + r, j)] = self.a[(i, j)];
                exact[(j, n + r)] = self.a[(i, j)];
            }
        }
        let mut reg = exact.clone();
        for i in 0..n {
            reg[(i, i)] += delta;
        }
        for r in 0..k {
            reg[(n + r, n + r)] -= delta;
        }
        let lu = reg.lu();
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&self.q));
        for r in 0..k {
            rhs[n + r] = target[r];
        }
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..10 {
            let res = &rhs - &exact * &sol;
            if inf_norm(&res) < 1e-15 * (1.0 + inf_norm(&rhs)) {
                break;
            }
            sol += lu.solve(&res)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        let mut y = DVector::zeros(m);
        for (r, &i) in active.iter().enumerate() {
            let v = sol[n + r];
            y[i] = if self.l[i] == self.u[i] {
                v
            } else if target[r] == self.l[i] {
                v.min(0.0)
            } else {
                v.max(0.0)
            };
        }
        Some((x, y))
    }

    fn finish(&self, x: &DVector<f64>, y: &DVector<f64>, status: QpStatus, iterations: usize, residual: f64) -> QpSolution {
        let xs = x.component_mul(&self.d);
        let ys = y.component_mul(&self.e) / self.c;
        let mut eq = DVector::zeros(self.prob.b_eq.len());
        let mut ineq = DVector::zeros(self.prob.b_in.len());
        let mut bound = DVector::zeros(self.prob.n());
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                Row::Eq(i) => eq[i] = ys[r],
                Row::In(i) => ineq[i] = ys[r],
                Row::Bound(j) => bound[j] = ys[r],
            }
        }
        QpSolution {
            objective: self.prob.objective(&xs),
            x: xs,
            status,
            kkt_residual: residual,
            iterations,
            eq_duals: eq,
            ineq_duals: ineq,
            bound_duals: bound,
        }
    }

    fn try_polish(&mut self, iterations: usize) -> Option<QpSolution> {
        let (xp, yp) = self.polish()?;
        let ax = &self.a * &xp;
        let zp = DVector::from_fn(ax.len(), |i, _| project(ax[i], self.l[i], self.u[i]));
        let (prim, dual, eps_p, eps_d) = self.residuals(&xp, &zp, &yp);
        if prim <= eps_p && dual <= eps_d {
            let sol = self.finish(&xp, &yp, QpStatus::Optimal, iterations, prim.max(dual));
            self.x = xp;
            self.z = zp;
            self.y = yp;
            Some(sol)
        } else {
            None
        }
    }

    /// Runs from the current (warm) iterate.
    pub fn solve(&mut self) -> QpSolution {
        let s = self.settings;
        let n = self.x.len();
        let m = self.z.len();
        if n == 0 {
            return self.finish(&self.x.clone(), &self.y.clone(), QpStatus::Optimal, 0, 0.0);
        }
        let mut updates = 0;
        for k in 1..=s.max_iter {
            let rhs = &self.x * s.sigma - &self.q + &self.at * (self.rho_vec.component_mul(&self.z) - &self.y);
            let xt = self.kkt.solve(&rhs);
            let zt = &self.a * &xt;
            let x_new = &xt * s.alpha + &self.x * (1.0 - s.alpha);
            let zr = &zt * s.alpha + &self.z * (1.0 - s.alpha);
            let z_new = DVector::from_fn(m, |i, _| project(zr[i] + self.y[i] / self.rho_vec[i], self.l[i], self.u[i]));
            let y_new = &self.y + (&zr - &z_new).component_mul(&self.rho_vec);
            let dy = &y_new - &self.y;
            self.x = x_new;
            self.z = z_new;
            self.y = y_new;

            if k % s.check_interval == 0 || k == s.max_iter {
                let (prim, dual, eps_p, eps_d) = self.residuals(&self.x, &self.z, &self.y);
                if prim <= eps_p && dual <= eps_d {
                    if s.polish {
                        if let Some(sol) = self.try_polish(k) {
                            return sol;
                        }
                    }
                    return self.finish(&self.x.clone(), &self.y.clone(), QpStatus::Optimal, k, prim.max(dual));
                }
                if s.polish && prim <= 1e4 * eps_p && dual <= 1e4 * eps_d {
                    if let Some(sol) = self.try_polish(k) {
                        return sol;
                    }
                }
                if self.infeasibility_certificate(&dy) {
                    return self.finish(&self.x.clone(), &self.y.clone(), QpStatus::Infeasible, k, prim.max(dual));
                }
            }
            // ρ can cycle on badly conditioned problems; ADMM converges for
            // any fixed ρ, so adaptation stops after a few changes.
            if m > 0 && k % s.adapt_interval == 0 && updates < MAX_RHO_UPDATES {
                let ax = &self.a * &self.x;
                let px = &self.p * &self.x;
                let aty = &self.at * &self.y;
                let prim_s = inf_norm(&(&ax - &self.z)) / inf_norm(&ax).max(inf_norm(&self.z)).max(1e-12);
                let dual_s = inf_norm(&(&px + &self.q + &aty))
                    / inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.q)).max(1e-12);
                let proposal = self.rho * (prim_s / dual_s.max(1e-30)).sqrt();
                if proposal.is_finite() && (proposal > 5.0 * self.rho || proposal < 0.2 * self.rho) {
                    self.set_rho(proposal);
                    updates += 1;
                }
            }
        }
        let (prim, dual, _, _) = self.residuals(&self.x, &self.z, &self.y);
        self.finish(&self.x.clone(), &self.y.clone(), QpStatus::MaxIter, s.max_iter, prim.max(dual))
    }
}
