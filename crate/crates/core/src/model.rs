//! Problem statement: boundary curves, kernel pieces, right-hand side, and
//! the geometric partition of the triangle `D = {0 < s < t < T}`.
//!
//! A [`Problem`] holds the curves `s = α_i(t)` (with `α_0 = 0`, `α_n(t) = t`
//! implicit), one m×m grid of expressions per kernel piece, and the m-vector
//! `f`. Derivatives (`α_i'`, `∂K_i/∂t`, `f'`) are derived symbolically at
//! construction. Structural hypotheses — curves ordered and vanishing at the
//! origin, slopes at zero strictly between 0 and 1, `f(0) = 0`, `K_n(t,t)`
//! invertible — are checked by dense sampling in [`validate`], which is the
//! testable surrogate for the analytic statements.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Bindings, Expr, ExprError};
use crate::quad;
use crate::{Dmat, Dvec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expression error in {context}: {source}")]
    Expr {
        context: String,
        #[source]
        source: ExprError,
    },
    #[error("problem file: {0}")]
    Schema(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("point (t={t}, s={s}) outside the domain 0 <= s <= t")]
    OutOfDomain { t: f64, s: f64 },
    #[error("K_n(t,t) numerically singular at t={t}")]
    SingularKnn { t: f64 },
}

fn expr_err(context: impl Into<String>) -> impl FnOnce(ExprError) -> ModelError {
    let context = context.into();
    move |source| ModelError::Expr { context, source }
}

/// One interior boundary curve `s = α_i(t)` with its derived derivative.
#[derive(Debug, Clone)]
pub struct BoundaryCurve {
    pub alpha: Expr,
    pub alpha_prime: Expr,
}

impl BoundaryCurve {
    pub fn new(alpha: Expr) -> Self {
        let alpha_prime = expr::differentiate(&alpha, "t");
        BoundaryCurve { alpha, alpha_prime }
    }
}

/// One kernel piece: an m×m grid of expressions in `(t, s)` plus the grid of
/// symbolic `∂/∂t` derivatives.
#[derive(Debug, Clone)]
pub struct KernelPiece {
    pub entries: Vec<Vec<Expr>>,
    pub entries_dt: Vec<Vec<Expr>>,
}

impl KernelPiece {
    pub fn new(entries: Vec<Vec<Expr>>) -> Self {
        let entries_dt = entries
            .iter()
            .map(|row| row.iter().map(|e| expr::differentiate(e, "t")).collect())
            .collect();
        KernelPiece {
            entries,
            entries_dt,
        }
    }
}

/// Index of a kernel region, 1-based: `D_i` lies between `α_{i-1}` and `α_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionIndex(pub usize);

/// A fully specified first-kind problem on `[0, T]`.
#[derive(Debug, Clone)]
pub struct Problem {
    pub m: usize,
    pub n: usize,
    /// Interior curves α_1 … α_{n-1}.
    pub boundaries: Vec<BoundaryCurve>,
    /// Kernel pieces K_1 … K_n.
    pub pieces: Vec<KernelPiece>,
    pub f: Vec<Expr>,
    pub f_prime: Vec<Expr>,
    /// Horizon T.
    pub horizon: f64,
}

/// On-disk problem document. Expressions use the variables `t` and `s`.
#[derive(Debug, Deserialize, Serialize)]
struct ProblemFile {
    m: usize,
    n: usize,
    #[serde(rename = "T")]
    horizon: f64,
    alphas: Vec<String>,
    kernels: Vec<Vec<Vec<String>>>,
    f: Vec<String>,
}

impl Problem {
    /// Build a problem from expression strings. `kernels[i][r][c]` is entry
    /// (r,c) of piece i+1; `alphas` holds the n-1 interior curves.
    pub fn from_exprs(
        m: usize,
        horizon: f64,
        alphas: &[&str],
        kernels: &[Vec<Vec<String>>],
        f: &[&str],
    ) -> Result<Problem, ModelError> {
        let n = kernels.len();
        if n == 0 {
            return Err(ModelError::Schema(
                "at least one kernel piece required".into(),
            ));
        }
        if alphas.len() + 1 != n {
            return Err(ModelError::Schema(format!(
                "{} interior curves do not match {} kernel pieces",
                alphas.len(),
                n
            )));
        }
        if f.len() != m {
            return Err(ModelError::Schema(format!(
                "f has {} components, expected m={}",
                f.len(),
                m
            )));
        }
        if !(horizon > 0.0) {
            return Err(ModelError::Schema("horizon T must be positive".into()));
        }
        let mut boundaries = Vec::with_capacity(alphas.len());
        for (i, a) in alphas.iter().enumerate() {
            let alpha = expr::parse(a).map_err(expr_err(format!("alpha[{}]", i + 1)))?;
            boundaries.push(BoundaryCurve::new(alpha));
        }
        let mut pieces = Vec::with_capacity(n);
        for (i, grid) in kernels.iter().enumerate() {
            if grid.len() != m || grid.iter().any(|row| row.len() != m) {
                return Err(ModelError::Schema(format!(
                    "kernel piece {} is not an {m}x{m} grid",
                    i + 1
                )));
            }
            let mut entries = Vec::with_capacity(m);
            for (r, row) in grid.iter().enumerate() {
                let mut out = Vec::with_capacity(m);
                for (c, text) in row.iter().enumerate() {
                    let e = expr::parse(text).map_err(expr_err(format!(
                        "kernel[{}][{}][{}]",
                        i + 1,
                        r,
                        c
                    )))?;
                    out.push(e);
                }
                entries.push(out);
            }
            pieces.push(KernelPiece::new(entries));
        }
        let mut f_exprs = Vec::with_capacity(m);
        for (r, text) in f.iter().enumerate() {
            f_exprs.push(expr::parse(text).map_err(expr_err(format!("f[{r}]")))?);
        }
        let f_prime = f_exprs
            .iter()
            .map(|e| expr::differentiate(e, "t"))
            .collect();
        Ok(Problem {
            m,
            n,
            boundaries,
            pieces,
            f: f_exprs,
            f_prime,
            horizon,
        })
    }

    /// Convenience constructor for scalar (m = 1) problems.
    pub fn scalar(
        horizon: f64,
        alphas: &[&str],
        kernels: &[&str],
        f: &str,
    ) -> Result<Problem, ModelError> {
        let grids: Vec<Vec<Vec<String>>> =
            kernels.iter().map(|k| vec![vec![k.to_string()]]).collect();
        Problem::from_exprs(1, horizon, alphas, &grids, &[f])
    }

    /// Parse a problem from its JSON document (see `docs/problem-schema.json`).
    pub fn from_json_str(text: &str) -> Result<Problem, ModelError> {
        let file: ProblemFile = serde_json::from_str(text)?;
        if file.kernels.len() != file.n {
            return Err(ModelError::Schema(format!(
                "n = {} but {} kernel pieces given",
                file.n,
                file.kernels.len()
            )));
        }
        let alphas: Vec<&str> = file.alphas.iter().map(|s| s.as_str()).collect();
        let f: Vec<&str> = file.f.iter().map(|s| s.as_str()).collect();
        Problem::from_exprs(file.m, file.horizon, &alphas, &file.kernels, &f)
    }

    fn ts(t: f64, s: f64) -> Bindings {
        Bindings::new().set("t", t).set("s", s)
    }

    pub fn alpha(&self, i: usize, t: f64) -> Result<f64, ModelError> {
        debug_assert!((1..self.n).contains(&i));
        expr::eval(&self.boundaries[i - 1].alpha, &Bindings::new().set("t", t))
            .map_err(expr_err(format!("alpha[{i}]")))
    }

    pub fn alpha_prime(&self, i: usize, t: f64) -> Result<f64, ModelError> {
        debug_assert!((1..self.n).contains(&i));
        expr::eval(
            &self.boundaries[i - 1].alpha_prime,
            &Bindings::new().set("t", t),
        )
        .map_err(expr_err(format!("alpha'[{i}]")))
    }

    /// Boundary of region i from above: `α_i(t)` for i < n, `t` for i = n,
    /// `0` for i = 0.
    pub fn region_bound(&self, i: usize, t: f64) -> Result<f64, ModelError> {
        if i == 0 {
            Ok(0.0)
        } else if i == self.n {
            Ok(t)
        } else {
            self.alpha(i, t)
        }
    }

    /// Locate the region containing `(t, s)`. A point exactly on a curve
    /// `s = α_i(t)` resolves to the lower region `i`; kernels may jump across
    /// curves, so a deterministic rule is required for reproducibility.
    pub fn locate(&self, t: f64, s: f64) -> Result<RegionIndex, ModelError> {
        if s > t || s < 0.0 {
            return Err(ModelError::OutOfDomain { t, s });
        }
        for i in 1..self.n {
            if s <= self.alpha(i, t)? {
                return Ok(RegionIndex(i));
            }
        }
        Ok(RegionIndex(self.n))
    }

    /// Evaluate a specific kernel piece at `(t, s)`. Pieces are defined on
    /// region closures, so evaluating piece i on its bounding curves is legal;
    /// quadrature uses this for one-sided panel endpoints.
    pub fn piece_eval(&self, i: usize, t: f64, s: f64) -> Result<Dmat, ModelError> {
        self.eval_grid(&self.pieces[i - 1].entries, t, s, i)
    }

    /// Evaluate `∂K_i/∂t` at `(t, s)`.
    pub fn piece_dt_eval(&self, i: usize, t: f64, s: f64) -> Result<Dmat, ModelError> {
        self.eval_grid(&self.pieces[i - 1].entries_dt, t, s, i)
    }

    fn eval_grid(&self, grid: &[Vec<Expr>], t: f64, s: f64, i: usize) -> Result<Dmat, ModelError> {
        let b = Self::ts(t, s);
        let mut out = Dmat::zeros(self.m, self.m);
        for r in 0..self.m {
            for c in 0..self.m {
                out[(r, c)] = expr::eval(&grid[r][c], &b)
                    .map_err(expr_err(format!("kernel[{i}][{r}][{c}] at (t={t}, s={s})")))?;
            }
        }
        Ok(out)
    }

    /// Kernel value at `(t, s)` using the piece selected by [`locate`].
    pub fn kernel_eval(&self, t: f64, s: f64) -> Result<Dmat, ModelError> {
        let RegionIndex(i) = self.locate(t, s)?;
        self.piece_eval(i, t, s)
    }

    /// `∂K/∂t` at `(t, s)` using the piece selected by [`locate`].
    pub fn kernel_dt_eval(&self, t: f64, s: f64) -> Result<Dmat, ModelError> {
        let RegionIndex(i) = self.locate(t, s)?;
        self.piece_dt_eval(i, t, s)
    }

    pub fn f_eval(&self, t: f64) -> Result<Dvec, ModelError> {
        let b = Bindings::new().set("t", t);
        let mut out = Dvec::zeros(self.m);
        for r in 0..self.m {
            out[r] = expr::eval(&self.f[r], &b).map_err(expr_err(format!("f[{r}]")))?;
        }
        Ok(out)
    }

    pub fn f_prime_eval(&self, t: f64) -> Result<Dvec, ModelError> {
        let b = Bindings::new().set("t", t);
        let mut out = Dvec::zeros(self.m);
        for r in 0..self.m {
            out[r] = expr::eval(&self.f_prime[r], &b).map_err(expr_err(format!("f'[{r}]")))?;
        }
        Ok(out)
    }

    /// `K_n(t, t)`.
    pub fn kn_tt(&self, t: f64) -> Result<Dmat, ModelError> {
        self.piece_eval(self.n, t, t)
    }

    /// LU factorization of `K_n(t,t)`, failing on numerical singularity.
    pub fn kn_tt_lu(
        &self,
        t: f64,
    ) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, ModelError> {
        let k = self.kn_tt(t)?;
        let scale = k.amax();
        let lu = k.lu();
        if lu.determinant().abs() <= 1e-300 + 1e-14 * scale.powi(self.m as i32) {
            return Err(ModelError::SingularKnn { t });
        }
        Ok(lu)
    }

    /// Jump coefficient matrices of the differentiated equation:
    /// `C_i(t) = α_i'(t) · (K_i − K_{i+1})(t, α_i(t))` for i = 1..n-1
    /// (not yet normalized by `K_n(t,t)^{-1}`).
    pub fn jump_coeffs(&self, t: f64) -> Result<Vec<Dmat>, ModelError> {
        let mut out = Vec::with_capacity(self.n.saturating_sub(1));
        for i in 1..self.n {
            let ai = self.alpha(i, t)?;
            let api = self.alpha_prime(i, t)?;
            let ki = self.piece_eval(i, t, ai)?;
            let kip = self.piece_eval(i + 1, t, ai)?;
            out.push((ki - kip) * api);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Hypothesis validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    /// Sample point at which the check came closest to failing (or failed).
    pub worst_t: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<HypothesisCheck>,
    pub passed: bool,
}

impl ValidationReport {
    fn push(&mut self, name: &str, passed: bool, worst_t: Option<f64>, detail: String) {
        self.passed &= passed;
        self.checks.push(HypothesisCheck {
            name: name.to_string(),
            passed,
            worst_t,
            detail,
        });
    }
}

/// Check the structural hypotheses on a dense grid of `samples` points.
/// Evaluation domain errors surface as failed checks, never as panics.
pub fn validate(p: &Problem, samples: usize) -> ValidationReport {
    assert!(samples >= 16, "validation grid too coarse");
    let mut rep = ValidationReport {
        checks: Vec::new(),
        passed: true,
    };

    // alpha_i(0) = 0
    {
        let mut worst = (0.0f64, None::<usize>);
        let mut err = None;
        for i in 1..p.n {
            match p.alpha(i, 0.0) {
                Ok(v) => {
                    if v.abs() > worst.0 {
                        worst = (v.abs(), Some(i));
                    }
                }
                Err(e) => err = Some(e.to_string()),
            }
        }
        match err {
            Some(msg) => rep.push("alpha_zero_at_origin", false, Some(0.0), msg),
            None => rep.push(
                "alpha_zero_at_origin",
                worst.0 <= 1e-12,
                Some(0.0),
                format!("max |alpha_i(0)| = {:.3e}", worst.0),
            ),
        }
    }

    // strict ordering 0 < alpha_1(t) < ... < alpha_{n-1}(t) < t on (0, T)
    {
        let mut ok = true;
        let mut worst_t = None;
        let mut detail = String::from("ordered on all samples");
        'outer: for k in 1..samples {
            let t = p.horizon * k as f64 / samples as f64;
            let mut prev = 0.0f64;
            for i in 1..p.n {
                match p.alpha(i, t) {
                    Ok(v) => {
                        if !(v > prev && v < t) {
                            ok = false;
                            worst_t = Some(t);
                            detail = format!("alpha_{i}({t}) = {v} violates ordering");
                            break 'outer;
                        }
                        prev = v;
                    }
                    Err(e) => {
                        ok = false;
                        worst_t = Some(t);
                        detail = e.to_string();
                        break 'outer;
                    }
                }
            }
        }
        rep.push("alpha_strict_ordering", ok, worst_t, detail);
    }

    // 0 < alpha_1'(0) < ... < alpha_{n-1}'(0) < 1
    {
        let mut ok = true;
        let mut detail = String::new();
        let mut prev = 0.0f64;
        for i in 1..p.n {
            match p.alpha_prime(i, 0.0) {
                Ok(v) => {
                    if !(v > prev && v < 1.0) {
                        ok = false;
                        detail = format!("alpha_{i}'(0) = {v} violates 0 < ... < 1 ordering");
                        break;
                    }
                    prev = v;
                }
                Err(e) => {
                    ok = false;
                    detail = e.to_string();
                    break;
                }
            }
        }
        if ok {
            detail = "slopes at origin strictly ordered in (0,1)".to_string();
        }
        rep.push("alpha_prime_ordering_at_zero", ok, Some(0.0), detail);
    }

    // f(0) = 0 componentwise
    {
        match p.f_eval(0.0) {
            Ok(v) => {
                let worst = v.amax();
                rep.push(
                    "f_vanishes_at_origin",
                    worst <= 1e-12,
                    Some(0.0),
                    format!("max |f_r(0)| = {worst:.3e}"),
                );
            }
            Err(e) => rep.push("f_vanishes_at_origin", false, Some(0.0), e.to_string()),
        }
    }

    // kernel pieces evaluable on the closures of their regions
    {
        let mut ok = true;
        let mut worst_t = None;
        let mut detail = String::from("all pieces evaluable on sampled regions");
        let t_samples = (samples / 8).clamp(8, 64);
        's_outer: for kt in 1..=t_samples {
            let t = p.horizon * kt as f64 / t_samples as f64;
            for i in 1..=p.n {
                let (lo, hi) = match (p.region_bound(i - 1, t), p.region_bound(i, t)) {
                    (Ok(lo), Ok(hi)) => (lo, hi),
                    _ => continue,
                };
                for ks in 0..=8 {
                    let s = lo + (hi - lo) * ks as f64 / 8.0;
                    if let Err(e) = p.piece_eval(i, t, s).and_then(|_| p.piece_dt_eval(i, t, s)) {
                        ok = false;
                        worst_t = Some(t);
                        detail = e.to_string();
                        break 's_outer;
                    }
                }
            }
        }
        rep.push("kernels_evaluable_on_regions", ok, worst_t, detail);
    }

    // K_n(t,t) invertible on the sampled grid
    {
        let mut ok = true;
        let mut worst: (f64, f64) = (f64::INFINITY, 0.0); // (min sigma ratio, at t)
        let mut detail = String::new();
        for k in 0..=samples {
            let t = p.horizon * k as f64 / samples as f64;
            match p.kn_tt(t) {
                Ok(m) => {
                    let sv = m.svd(false, false);
                    let smax = sv.singular_values.max();
                    let smin = sv.singular_values.min();
                    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
                    if ratio < worst.0 {
                        worst = (ratio, t);
                    }
                    if !(smin > 1e-9 * smax.max(1.0)) {
                        ok = false;
                        detail = format!("sigma_min/sigma_max = {ratio:.3e} at t = {t}");
                        break;
                    }
                }
                Err(e) => {
                    ok = false;
                    worst.1 = t;
                    detail = e.to_string();
                    break;
                }
            }
        }
        if ok {
            detail = format!("min sigma ratio {:.3e} at t = {}", worst.0, worst.1);
        }
        rep.push("kn_invertible_on_diagonal", ok, Some(worst.1), detail);
    }

    rep
}

// ---------------------------------------------------------------------------
// Residual evaluators for the two equation forms
// ---------------------------------------------------------------------------

/// Residual of the differentiated (functional-integral) form at `t` for an
/// arbitrary continuous candidate `x`:
///
/// ```text
/// K_n(t,t)x(t) + Σ_i α_i'(t)(K_i − K_{i+1})(t,α_i(t)) x(α_i(t))
///              + Σ_i ∫ K_i^{(1)}(t,s) x(s) ds − f'(t)
/// ```
///
/// The integral is taken region by region with adaptive quadrature, so the
/// kernel jumps never fall inside a panel.
pub fn functional_residual<F>(p: &Problem, x: &F, t: f64, quad_tol: f64) -> Result<Dvec, ModelError>
where
    F: Fn(f64) -> Dvec,
{
    let mut acc = p.kn_tt(t)? * x(t);
    for (i, c) in p.jump_coeffs(t)?.into_iter().enumerate() {
        let ai = p.alpha(i + 1, t)?;
        acc += c * x(ai);
    }
    for i in 1..=p.n {
        let lo = p.region_bound(i - 1, t)?;
        let hi = p.region_bound(i, t)?;
        if hi - lo <= 0.0 {
            continue;
        }
        let mut err: Option<ModelError> = None;
        let contrib = quad::adaptive(
            |s| match p.piece_dt_eval(i, t, s) {
                Ok(k) => k * x(s),
                Err(e) => {
                    err = Some(e);
                    Dvec::zeros(p.m)
                }
            },
            lo,
            hi,
            p.m,
            quad_tol / p.n as f64,
        );
        if let Some(e) = err {
            return Err(e);
        }
        acc += contrib;
    }
    acc -= p.f_prime_eval(t)?;
    Ok(acc)
}

/// First-kind residual `Σ_i ∫ K_i(t,s) x(s) ds − f(t)` at `t`.
pub fn first_kind_residual<F>(p: &Problem, x: &F, t: f64, quad_tol: f64) -> Result<Dvec, ModelError>
where
    F: Fn(f64) -> Dvec,
{
    let mut acc = Dvec::zeros(p.m);
    for i in 1..=p.n {
        let lo = p.region_bound(i - 1, t)?;
        let hi = p.region_bound(i, t)?;
        if hi - lo <= 0.0 {
            continue;
        }
        let mut err: Option<ModelError> = None;
        let contrib = quad::adaptive(
            |s| match p.piece_eval(i, t, s) {
                Ok(k) => k * x(s),
                Err(e) => {
                    err = Some(e);
                    Dvec::zeros(p.m)
                }
            },
            lo,
            hi,
            p.m,
            quad_tol / p.n as f64,
        );
        if let Some(e) = err {
            return Err(e);
        }
        acc += contrib;
    }
    acc -= p.f_eval(t)?;
    Ok(acc)
}

#[cfg(test)]
pub(crate) fn problem_p1() -> Problem {
    Problem::scalar(1.0, &["t/2"], &["2", "1"], "3*t/2").unwrap()
}

#[cfg(test)]
pub(crate) fn problem_p2() -> Problem {
    Problem::scalar(1.0, &["t/2"], &["1", "-1"], "t").unwrap()
}

#[cfg(test)]
pub(crate) fn problem_p3() -> Problem {
    Problem::scalar(1.0, &["t/4", "t/2"], &["1", "-3", "1"], "t").unwrap()
}
