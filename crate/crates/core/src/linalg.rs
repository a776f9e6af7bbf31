//! Small dense-matrix helpers shared across modules: spectral norms,
//! SVD-based rank/null-space decisions and pseudoinverse solves.

use crate::{Dmat, Dvec};

/// Spectral (operator-2) norm via singular values.
pub fn spectral_norm(a: &Dmat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().singular_values().max()
}

/// Result of a rank-revealing SVD with an explicit threshold.
pub struct RankedSvd {
    pub rank: usize,
    /// Orthonormal basis of the (numerical) right null space.
    pub right_null: Vec<Dvec>,
    /// Orthonormal basis of the left null space.
    pub left_null: Vec<Dvec>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    threshold: f64,
}

impl RankedSvd {
    /// Minimum-norm least-squares solve using the same rank threshold that
    /// produced the null-space split.
    pub fn solve_min_norm(&self, b: &Dvec) -> Dvec {
        self.svd
            .solve(b, self.threshold)
            .expect("svd solve with computed factors")
    }
}

/// Sign-canonicalize a vector so its largest-magnitude entry is positive.
pub fn canonical_sign(v: &mut Dvec) {
    let mut best = 0usize;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        *v = -&*v;
    }
}

/// Rank-revealing SVD of a square (or rectangular) matrix. Singular values
/// at or below `rel_tol * max(sigma_max, scale)` count as zero; `scale`
/// guards the all-zero-matrix case where `sigma_max` itself vanishes.
pub fn ranked_svd(a: &Dmat, rel_tol: f64, scale: f64) -> RankedSvd {
    let svd = a.clone().svd(true, true);
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let sigma_max = sigma.iter().cloned().fold(0.0f64, f64::max);
    let threshold = rel_tol * sigma_max.max(scale);
    let rank = sigma.iter().filter(|&&s| s > threshold).count();

    let v_t = svd.v_t.as_ref().expect("svd computed with v");
    let u = svd.u.as_ref().expect("svd computed with u");
    let ncols = a.ncols();
    let nrows = a.nrows();

    let mut right_null = Vec::new();
    for k in 0..ncols {
        let below = k >= sigma.len() || sigma[k] <= threshold;
        if below && k < v_t.nrows() {
            let mut v = Dvec::from_iterator(ncols, v_t.row(k).iter().copied());
            canonical_sign(&mut v);
            right_null.push(v);
        }
    }
    let mut left_null = Vec::new();
    for k in 0..nrows {
        let below = k >= sigma.len() || sigma[k] <= threshold;
        if below && k < u.ncols() {
            let mut v = Dvec::from_iterator(nrows, u.column(k).iter().copied());
            canonical_sign(&mut v);
            left_null.push(v);
        }
    }

    RankedSvd {
        rank,
        right_null,
        left_null,
        svd,
        threshold,
    }
}

/// Determinant of a small square matrix built from pairings.
pub fn det(a: &Dmat) -> f64 {
    a.clone().determinant()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_of_diag() {
        let a = Dmat::from_diagonal(&Dvec::from_vec(vec![3.0, -5.0, 1.0]));
        assert!((spectral_norm(&a) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn null_space_of_rank_deficient() {
        let a = Dmat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let rs = ranked_svd(&a, 1e-12, 1.0);
        assert_eq!(rs.rank, 1);
        assert_eq!(rs.right_null.len(), 1);
        let v = &rs.right_null[0];
        assert!((a.clone() * v).norm() < 1e-12);
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_full_null_space() {
        let a = Dmat::zeros(1, 1);
        let rs = ranked_svd(&a, 1e-9, 1.0);
        assert_eq!(rs.rank, 0);
        assert_eq!(rs.right_null.len(), 1);
        // canonical sign makes the basis vector +1
        assert!((rs.right_null[0][0] - 1.0).abs() < 1e-12);
        assert!((rs.left_null[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_norm_solve_consistent_system() {
        let a = Dmat::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        let b = Dvec::from_vec(vec![1.0, 0.0]);
        let rs = ranked_svd(&a, 1e-12, 1.0);
        let x = rs.solve_min_norm(&b);
        assert!(((a * &x) - b).norm() < 1e-12);
    }
}
