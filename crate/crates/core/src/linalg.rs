use nalgebra::{DMatrix, DVector, Dyn, LU};

/// Pivots smaller than this fraction of the largest entry count as zero.
pub(crate) const PIVOT_RTOL: f64 = 1e-10;

pub(crate) fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// LU factorization with partial pivoting that refuses near-singular input.
pub(crate) struct CheckedLu {
    lu: LU<f64, Dyn, Dyn>,
}

impl CheckedLu {
    pub(crate) fn new(m: DMatrix<f64>) -> Option<Self> {
        assert!(m.is_square());
        if m.nrows() == 0 {
            return Some(Self { lu: m.lu() });
        }
        let scale = m.amax();
        let lu = m.lu();
        let min_pivot = lu.u().diagonal().amin();
        if scale == 0.0 || !(min_pivot >= PIVOT_RTOL * scale) {
            return None;
        }
        Some(Self { lu })
    }

    pub(crate) fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        if rhs.nrows() == 0 {
            return rhs.clone();
        }
        self.lu.solve(rhs).expect("factor already checked")
    }

    pub(crate) fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if rhs.nrows() == 0 {
            return rhs.clone();
        }
        self.lu.solve(rhs).expect("factor already checked")
    }
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
