//! The characteristic matrix family `B(j)` and its singular-point analysis.
//!
//! `B(j) = K_n(0,0) + Σ_i β_i^{1+j} ΔK_i` with `β_i = α_i'(0)` and
//! `ΔK_i = K_i(0,0) − K_{i+1}(0,0)` governs the solvability of the
//! coefficient equations of the log-power expansion: the coefficient of `tʲ`
//! satisfies a linear difference equation in `z = ln t` whose constant part
//! is exactly `B(j)`. Derivatives in `j` bring in powers of `a_i = ln β_i`:
//! `B^{(k)}(j) = Σ_i β_i^{1+j} a_i^k ΔK_i`.
//!
//! A value `j` is regular when `B(j)` is invertible. At a singular point the
//! *index* is the smallest `k` such that the null space is annihilated by
//! `B^{(1)}..B^{(k-1)}` and the pairing matrix `[⟨B^{(k)}φ_i, ψ_l⟩]` is
//! nonsingular; in the scalar case this is the root multiplicity of `B`.
//! When the index test fails, generalized Jordan chains still may provide a
//! complete set; [`jordan_chains`] builds them by successive bordered solves.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, spectral_norm};
use crate::model::{ModelError, Problem};
use crate::{Dmat, Dvec};

#[derive(Debug, Error)]
pub enum CharopError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("alpha_{i}'(0) = {value} is not positive; the log-power analysis does not apply")]
    NonPositiveSlope { i: usize, value: f64 },
    #[error("jordan chain for null direction {dir} exceeded the length cap {cap}")]
    ChainCapExceeded { dir: usize, cap: usize },
    #[error("point j = {j} is regular; no jordan data to build")]
    RegularPoint { j: usize },
}

/// Data of the characteristic family, all evaluated at the origin.
#[derive(Debug, Clone)]
pub struct CharOperator {
    /// `K_n(0,0)`.
    pub k_n00: Dmat,
    /// `ΔK_i = K_i(0,0) − K_{i+1}(0,0)` for i = 1..n-1.
    pub deltas: Vec<Dmat>,
    /// `β_i = α_i'(0)`, strictly increasing in (0, 1).
    pub betas: Vec<f64>,
    /// `a_i = ln β_i` (all negative).
    pub log_betas: Vec<f64>,
}

impl CharOperator {
    /// Assemble directly from matrices; validates the slope ordering.
    pub fn from_matrices(
        k_n00: Dmat,
        deltas: Vec<Dmat>,
        betas: Vec<f64>,
    ) -> Result<CharOperator, CharopError> {
        assert_eq!(deltas.len(), betas.len());
        let mut prev = 0.0;
        for (idx, &b) in betas.iter().enumerate() {
            if b <= prev || b >= 1.0 {
                return Err(CharopError::NonPositiveSlope {
                    i: idx + 1,
                    value: b,
                });
            }
            prev = b;
        }
        let log_betas = betas.iter().map(|b| b.ln()).collect();
        Ok(CharOperator {
            k_n00,
            deltas,
            betas,
            log_betas,
        })
    }

    pub fn dim(&self) -> usize {
        self.k_n00.nrows()
    }

    /// `B(j)` for real `j`.
    pub fn b(&self, j: f64) -> Dmat {
        let mut out = self.k_n00.clone();
        for (d, &beta) in self.deltas.iter().zip(&self.betas) {
            out += d * beta.powf(1.0 + j);
        }
        out
    }

    /// `B^{(k)}(j)` for `k ≥ 1`; `k = 0` falls back to [`CharOperator::b`].
    pub fn b_deriv(&self, j: f64, k: usize) -> Dmat {
        if k == 0 {
            return self.b(j);
        }
        let mut out = Dmat::zeros(self.dim(), self.dim());
        for ((d, &beta), &a) in self.deltas.iter().zip(&self.betas).zip(&self.log_betas) {
            out += d * (beta.powf(1.0 + j) * a.powi(k as i32));
        }
        out
    }

    /// Scale of the family, used to anchor relative rank thresholds even
    /// where `B(j)` itself nearly vanishes.
    pub fn scale(&self) -> f64 {
        let mut s = spectral_norm(&self.k_n00);
        for d in &self.deltas {
            s += spectral_norm(d);
        }
        s.max(1e-300)
    }
}

/// Build the characteristic data of a problem.
pub fn build_charop(p: &Problem) -> Result<CharOperator, CharopError> {
    let k_n00 = p.piece_eval(p.n, 0.0, 0.0)?;
    let mut deltas = Vec::with_capacity(p.n.saturating_sub(1));
    let mut betas = Vec::with_capacity(p.n.saturating_sub(1));
    for i in 1..p.n {
        deltas.push(p.piece_eval(i, 0.0, 0.0)? - p.piece_eval(i + 1, 0.0, 0.0)?);
        let beta = p.alpha_prime(i, 0.0)?;
        if beta <= 0.0 {
            return Err(CharopError::NonPositiveSlope { i, value: beta });
        }
        betas.push(beta);
    }
    CharOperator::from_matrices(k_n00, deltas, betas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PointKind {
    Regular,
    Singular,
}

/// Classification tolerances.
#[derive(Debug, Clone)]
pub struct ClassifyTol {
    /// Relative rank threshold for the SVD of `B(j)`.
    pub rank_rel: f64,
    /// Threshold for the null-space inclusion checks `‖B^{(i)}φ‖ ≈ 0`.
    pub inclusion: f64,
    /// Threshold for the pairing determinant.
    pub det: f64,
    /// Cap on the index search.
    pub k_max: usize,
    /// Cap on jordan chain lengths.
    pub chain_cap: usize,
}

impl Default for ClassifyTol {
    fn default() -> Self {
        ClassifyTol {
            rank_rel: 1e-9,
            inclusion: 1e-8,
            det: 1e-8,
            k_max: 8,
            chain_cap: 8,
        }
    }
}

/// Classification of one integer point of the family.
#[derive(Debug, Clone, Serialize)]
pub struct SingularPointInfo {
    pub j: usize,
    pub kind: PointKind,
    /// dim N(B(j)).
    pub rank_defect: usize,
    /// Smallest k whose pairing determinant is nonzero; `None` when the
    /// search failed (the jordan-chain route may still apply).
    pub index: Option<usize>,
    /// Orthonormal right null basis.
    pub phi: Vec<Dvec>,
    /// Orthonormal left null basis.
    pub psi: Vec<Dvec>,
    /// The pairing determinant at the found index.
    pub det_test: Option<f64>,
}

/// Classify integer point `j`.
pub fn classify_point(op: &CharOperator, j: usize, tol: &ClassifyTol) -> SingularPointInfo {
    assert!(tol.k_max >= 1);
    let b = op.b(j as f64);
    let svd = linalg::ranked_svd(&b, tol.rank_rel, op.scale());
    let r = b.nrows() - svd.rank;
    if r == 0 {
        return SingularPointInfo {
            j,
            kind: PointKind::Regular,
            rank_defect: 0,
            index: None,
            phi: Vec::new(),
            psi: Vec::new(),
            det_test: None,
        };
    }
    let phi = svd.right_null;
    let psi = svd.left_null;
    let scale = op.scale();

    let mut index = None;
    let mut det_test = None;
    for k in 1..=tol.k_max {
        let bk = op.b_deriv(j as f64, k);
        let mut pairing = Dmat::zeros(r, r);
        for (col, ph) in phi.iter().enumerate() {
            let image = &bk * ph;
            for (row, ps) in psi.iter().enumerate() {
                pairing[(row, col)] = image.dot(ps);
            }
        }
        let d = linalg::det(&pairing);
        if d.abs() > tol.det * scale.powi(r as i32) {
            index = Some(k);
            det_test = Some(d);
            break;
        }
        // det ≈ 0 at this order: a higher index requires the whole null
        // space to be annihilated by B^{(k)}
        let annihilated = phi
            .iter()
            .all(|ph| (&bk * ph).amax() <= tol.inclusion * scale);
        if !annihilated {
            break;
        }
    }

    SingularPointInfo {
        j,
        kind: PointKind::Singular,
        rank_defect: r,
        index,
        phi,
        psi,
        det_test,
    }
}

/// Generalized Jordan data at a singular point.
#[derive(Debug, Clone, Serialize)]
pub struct JordanData {
    /// One chain per null direction, `chains[i][l]` = φ_i^{(l+1)}.
    pub chains: Vec<Vec<Dvec>>,
    pub lengths: Vec<usize>,
    /// Determinant of the pairing of chain obstruction vectors with the left
    /// null basis; nonzero means the set is complete.
    pub solvability_det: f64,
    pub complete: bool,
}

impl JordanData {
    pub fn max_length(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Obstruction vector of chain `chain` continued to length `len + 1`:
/// `Σ_{s=1}^{len} B^{(s)}(j) φ^{(len+1-s)} / s!`. A chain ends exactly when
/// this vector has a component against the left null space.
fn chain_obstruction(op: &CharOperator, j: f64, chain: &[Dvec]) -> Dvec {
    let len = chain.len();
    let mut rhs = Dvec::zeros(op.dim());
    let mut fact = 1.0f64;
    for s in 1..=len {
        fact *= s as f64;
        rhs += op.b_deriv(j, s) * &chain[len - s] / fact;
    }
    rhs
}

/// Build generalized Jordan chains at singular point `j_star` by successive
/// minimum-norm solves of `B(j*) φ^{(l+1)} = −(obstruction)`; each chain
/// terminates when its next system stops being solvable.
pub fn jordan_chains(
    op: &CharOperator,
    j_star: usize,
    tol: &ClassifyTol,
) -> Result<JordanData, CharopError> {
    let cls = classify_point(op, j_star, tol);
    if cls.kind == PointKind::Regular {
        return Err(CharopError::RegularPoint { j: j_star });
    }
    let j = j_star as f64;
    let b = op.b(j);
    let svd = linalg::ranked_svd(&b, tol.rank_rel, op.scale());
    let scale = op.scale();

    let mut chains = Vec::with_capacity(cls.phi.len());
    for (dir, phi1) in cls.phi.iter().enumerate() {
        let mut chain = vec![phi1.clone()];
        loop {
            if chain.len() >= tol.chain_cap {
                return Err(CharopError::ChainCapExceeded {
                    dir,
                    cap: tol.chain_cap,
                });
            }
            let rhs = -chain_obstruction(op, j, &chain);
            // solvable iff the obstruction is orthogonal to the left null space
            let blocked = cls
                .psi
                .iter()
                .any(|ps| rhs.dot(ps).abs() > tol.inclusion * scale.max(rhs.amax()));
            if blocked {
                break;
            }
            let next = svd.solve_min_norm(&rhs);
            debug_assert!(((&b * &next) - &rhs).amax() <= 1e-6 * scale);
            chain.push(next);
        }
        chains.push(chain);
    }

    let r = chains.len();
    let mut pairing = Dmat::zeros(r, r);
    for (col, chain) in chains.iter().enumerate() {
        let obstruction = chain_obstruction(op, j, chain);
        for (row, ps) in cls.psi.iter().enumerate() {
            pairing[(row, col)] = obstruction.dot(ps);
        }
    }
    let solvability_det = linalg::det(&pairing);
    let complete = solvability_det.abs() > tol.det * scale.powi(r as i32);

    Ok(JordanData {
        lengths: chains.iter().map(|c| c.len()).collect(),
        chains,
        solvability_det,
        complete,
    })
}

/// Scan result over `j = 0..=N`.
#[derive(Debug, Serialize)]
pub struct ScanReport {
    pub points: Vec<SingularPointInfo>,
    pub jordan: Vec<Option<JordanData>>,
    /// Every point regular or with a resolved index.
    pub cond_c: bool,
    /// Every singular point carries a complete generalized Jordan set.
    pub cond_c1: bool,
}

impl ScanReport {
    pub fn singular_points(&self) -> impl Iterator<Item = &SingularPointInfo> {
        self.points.iter().filter(|p| p.kind == PointKind::Singular)
    }
}

/// Classify all integer points `0..=n_max` and collect jordan data for the
/// singular ones.
pub fn scan(op: &CharOperator, n_max: usize, tol: &ClassifyTol) -> Result<ScanReport, CharopError> {
    let mut points = Vec::with_capacity(n_max + 1);
    let mut jordan = Vec::with_capacity(n_max + 1);
    let mut cond_c = true;
    let mut cond_c1 = true;
    for j in 0..=n_max {
        let info = classify_point(op, j, tol);
        let jd = match info.kind {
            PointKind::Singular => {
                let jd = jordan_chains(op, j, tol)?;
                cond_c1 &= jd.complete;
                Some(jd)
            }
            PointKind::Regular => None,
        };
        if info.kind == PointKind::Singular && info.index.is_none() {
            cond_c = false;
        }
        points.push(info);
        jordan.push(jd);
    }
    Ok(ScanReport {
        points,
        jordan,
        cond_c,
        cond_c1,
    })
}

/// A 2×2 family with a nonstationary chain: `B(0)φ¹ = 0` and `B'(0)φ¹ ≠ 0`
/// yet `⟨B'(0)φ¹, ψ⟩ = 0`, so the index test fails while a complete chain of
/// length 2 exists. Shared by the expansion tests.
#[cfg(test)]
pub(crate) fn tests_nonstationary_op() -> CharOperator {
    let betas = [0.25f64, 0.5];
    let a = [betas[0].ln(), betas[1].ln()];
    // targets: B(0), B'(0), B''(0)
    let t0 = Dmat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
    let t1 = Dmat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
    let t2 = Dmat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    // solve K + β₁Δ₁ + β₂Δ₂ = T0, β₁a₁Δ₁ + β₂a₂Δ₂ = T1,
    // β₁a₁²Δ₁ + β₂a₂²Δ₂ = T2 entrywise
    let v = Dmat::from_row_slice(
        3,
        3,
        &[
            1.0,
            betas[0],
            betas[1],
            0.0,
            betas[0] * a[0],
            betas[1] * a[1],
            0.0,
            betas[0] * a[0] * a[0],
            betas[1] * a[1] * a[1],
        ],
    );
    let lu = v.lu();
    let mut k = Dmat::zeros(2, 2);
    let mut d1 = Dmat::zeros(2, 2);
    let mut d2 = Dmat::zeros(2, 2);
    for r in 0..2 {
        for c in 0..2 {
            let rhs = Dvec::from_vec(vec![t0[(r, c)], t1[(r, c)], t2[(r, c)]]);
            let sol = lu.solve(&rhs).unwrap();
            k[(r, c)] = sol[0];
            d1[(r, c)] = sol[1];
            d2[(r, c)] = sol[2];
        }
    }
    CharOperator::from_matrices(k, vec![d1, d2], betas.to_vec()).unwrap()
}
