//! Parameter-affine vectors and polynomials in `z = ln t`.
//!
//! Free parameters are first-class symbols: an [`AffineVec`] is a base vector
//! plus one direction vector per parameter, so a whole solution family is
//! carried through the coefficient recurrences without ever sampling
//! parameter values. Everything here is linear in the parameters — the
//! underlying equation is linear — and the operations preserve that shape.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::{Dmat, Dvec};

/// Provenance of one free parameter.
#[derive(Debug, Clone, Serialize)]
pub struct ParamInfo {
    pub name: String,
    /// Power of `t` whose coefficient equation introduced the parameter.
    pub j: usize,
    /// Position within that equation's null-space basis.
    pub dir: usize,
}

/// Ordered registry of the free parameters of an expansion.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ParamRegistry {
    params: Vec<ParamInfo>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Register a fresh parameter `c<k>` introduced at power `j`.
    pub fn register(&mut self, j: usize, dir: usize) -> usize {
        let idx = self.params.len();
        self.params.push(ParamInfo {
            name: format!("c{}", idx + 1),
            j,
            dir,
        });
        idx
    }

    /// Densify a named assignment into a by-index vector. Unknown names are
    /// rejected; missing parameters are an error too.
    pub fn assignment_vector(
        &self,
        assignment: &BTreeMap<String, f64>,
    ) -> Result<Vec<f64>, String> {
        for name in assignment.keys() {
            if self.index_of(name).is_none() {
                return Err(format!("unknown parameter `{name}`"));
            }
        }
        Ok(self
            .params
            .iter()
            .map(|p| assignment.get(&p.name).copied().unwrap_or(0.0))
            .collect())
    }
}

/// A vector affine in the free parameters: `base + Σ_c value_c · dir_c`.
#[derive(Debug, Clone)]
pub struct AffineVec {
    pub base: Dvec,
    /// Parameter index → direction vector. Sparse: most coefficients touch
    /// few parameters.
    pub terms: BTreeMap<usize, Dvec>,
}

impl AffineVec {
    pub fn zeros(m: usize) -> Self {
        AffineVec {
            base: Dvec::zeros(m),
            terms: BTreeMap::new(),
        }
    }

    pub fn from_base(base: Dvec) -> Self {
        AffineVec {
            base,
            terms: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn add_assign(&mut self, other: &AffineVec) {
        self.base += &other.base;
        for (&k, v) in &other.terms {
            match self.terms.get_mut(&k) {
                Some(slot) => *slot += v,
                None => {
                    self.terms.insert(k, v.clone());
                }
            }
        }
    }

    pub fn sub_assign(&mut self, other: &AffineVec) {
        self.base -= &other.base;
        for (&k, v) in &other.terms {
            match self.terms.get_mut(&k) {
                Some(slot) => *slot -= v,
                None => {
                    self.terms.insert(k, -v);
                }
            }
        }
    }

    pub fn neg(&self) -> AffineVec {
        AffineVec {
            base: -&self.base,
            terms: self.terms.iter().map(|(&k, v)| (k, -v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> AffineVec {
        AffineVec {
            base: &self.base * c,
            terms: self.terms.iter().map(|(&k, v)| (k, v * c)).collect(),
        }
    }

    pub fn mat_apply(&self, a: &Dmat) -> AffineVec {
        AffineVec {
            base: a * &self.base,
            terms: self.terms.iter().map(|(&k, v)| (k, a * v)).collect(),
        }
    }

    /// Largest absolute entry over the base and all parameter directions.
    pub fn max_abs(&self) -> f64 {
        let mut v = if self.base.is_empty() {
            0.0
        } else {
            self.base.amax()
        };
        for t in self.terms.values() {
            v = v.max(t.amax());
        }
        v
    }

    pub fn eval(&self, params: &[f64]) -> Dvec {
        let mut out = self.base.clone();
        for (&k, v) in &self.terms {
            out += v * params[k];
        }
        out
    }
}

/// A polynomial in `z = ln t` with [`AffineVec`] coefficients.
#[derive(Debug, Clone)]
pub struct ZPoly {
    /// `coeffs[k]` multiplies `z^k`.
    coeffs: Vec<AffineVec>,
    m: usize,
}

impl ZPoly {
    pub fn zero(m: usize) -> Self {
        ZPoly {
            coeffs: Vec::new(),
            m,
        }
    }

    pub fn from_coeffs(m: usize, coeffs: Vec<AffineVec>) -> Self {
        let mut p = ZPoly { coeffs, m };
        p.trim_exact_zeros();
        p
    }

    pub fn constant(v: AffineVec) -> Self {
        let m = v.dim();
        ZPoly::from_coeffs(m, vec![v])
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// Structural degree; zero polynomial reports 0.
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.coeffs.iter().all(|c| c.max_abs() <= tol)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeff(&self, k: usize) -> AffineVec {
        self.coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| AffineVec::zeros(self.m))
    }

    pub fn coeffs(&self) -> &[AffineVec] {
        &self.coeffs
    }

    fn slot(&mut self, k: usize) -> &mut AffineVec {
        while self.coeffs.len() <= k {
            self.coeffs.push(AffineVec::zeros(self.m));
        }
        &mut self.coeffs[k]
    }

    pub fn add_coeff(&mut self, k: usize, v: &AffineVec) {
        self.slot(k).add_assign(v);
    }

    pub fn add_assign(&mut self, other: &ZPoly) {
        for (k, c) in other.coeffs.iter().enumerate() {
            self.slot(k).add_assign(c);
        }
    }

    pub fn sub_assign(&mut self, other: &ZPoly) {
        for (k, c) in other.coeffs.iter().enumerate() {
            self.slot(k).sub_assign(c);
        }
    }

    pub fn neg(&self) -> ZPoly {
        ZPoly {
            coeffs: self.coeffs.iter().map(AffineVec::neg).collect(),
            m: self.m,
        }
    }

    pub fn scale(&self, c: f64) -> ZPoly {
        ZPoly {
            coeffs: self.coeffs.iter().map(|a| a.scale(c)).collect(),
            m: self.m,
        }
    }

    pub fn mat_apply(&self, a: &Dmat) -> ZPoly {
        ZPoly {
            coeffs: self.coeffs.iter().map(|c| c.mat_apply(a)).collect(),
            m: self.m,
        }
    }

    /// Substitute `z → z + c` (binomial expansion).
    pub fn shift(&self, c: f64) -> ZPoly {
        let mut out = ZPoly::zero(self.m);
        for (k, coeff) in self.coeffs.iter().enumerate() {
            // coeff · (z + c)^k
            let mut binom = 1.0f64;
            let mut cpow = 1.0f64;
            for q in (0..=k).rev() {
                // binom = C(k, q), cpow = c^(k-q)
                out.slot(q).add_assign(&coeff.scale(binom * cpow));
                if q > 0 {
                    binom = binom * q as f64 / (k - q + 1) as f64;
                    cpow *= c;
                }
            }
        }
        out.trim_exact_zeros();
        out
    }

    /// d/dz.
    pub fn derivative(&self) -> ZPoly {
        if self.coeffs.len() <= 1 {
            return ZPoly::zero(self.m);
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| c.scale(k as f64))
            .collect();
        ZPoly { coeffs, m: self.m }
    }

    pub fn eval(&self, z: f64, params: &[f64]) -> Dvec {
        let mut out = Dvec::zeros(self.m);
        for c in self.coeffs.iter().rev() {
            out = out * z + c.eval(params);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs
            .iter()
            .map(AffineVec::max_abs)
            .fold(0.0, f64::max)
    }

    fn trim_exact_zeros(&mut self) {
        while let Some(last) = self.coeffs.last() {
            if last.max_abs() == 0.0 {
                self.coeffs.pop();
            } else {
                break;
            }
        }
    }

    /// Drop top coefficients whose magnitude is below `tol` (used before
    /// degree decisions so roundoff dust does not inflate ansatz degrees).
    pub fn trimmed(&self, tol: f64) -> ZPoly {
        let mut c = self.coeffs.clone();
        while let Some(last) = c.last() {
            if last.max_abs() <= tol {
                c.pop();
            } else {
                break;
            }
        }
        ZPoly {
            coeffs: c,
            m: self.m,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn av(vals: &[f64]) -> AffineVec {
        AffineVec::from_base(Dvec::from_vec(vals.to_vec()))
    }

    #[test]
    fn shift_matches_direct_evaluation() {
        // p(z) = (1, 2) z² + (0, 1) z + (3, 0)
        let p = ZPoly::from_coeffs(2, vec![av(&[3.0, 0.0]), av(&[0.0, 1.0]), av(&[1.0, 2.0])]);
        let q = p.shift(-0.7);
        for z in [-1.5, 0.0, 2.3] {
            let a = p.eval(z - 0.7, &[]);
            let b = q.eval(z, &[]);
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn derivative_reduces_degree() {
        let p = ZPoly::from_coeffs(1, vec![av(&[1.0]), av(&[2.0]), av(&[3.0])]);
        let d = p.derivative();
        assert_eq!(d.degree(), 1);
        assert!((d.eval(2.0, &[])[0] - (2.0 + 12.0)).abs() < 1e-14);
    }

    #[test]
    fn affine_eval_is_affine_in_params() {
        let mut v = AffineVec::from_base(Dvec::from_vec(vec![1.0]));
        v.terms.insert(0, Dvec::from_vec(vec![2.0]));
        v.terms.insert(1, Dvec::from_vec(vec![-1.0]));
        let a = v.eval(&[1.0, 0.0]);
        let b = v.eval(&[0.0, 1.0]);
        let z = v.eval(&[0.0, 0.0]);
        let ab = v.eval(&[1.0, 1.0]);
        // superposition around the base point
        assert!(((&a + &b) - (&ab + &z)).amax() < 1e-14);
    }

    #[test]
    fn registry_assignment_vector() {
        let mut reg = ParamRegistry::new();
        reg.register(0, 0);
        reg.register(0, 1);
        let mut asn = BTreeMap::new();
        asn.insert("c2".to_string(), 5.0);
        let v = reg.assignment_vector(&asn).unwrap();
        assert_eq!(v, vec![0.0, 5.0]);
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), 1.0);
        assert!(reg.assignment_vector(&bad).is_err());
    }
}
