//! Taylor data of a problem at the origin, computed by repeated symbolic
//! differentiation. Kernel pieces are expanded to total degree `order` in
//! `(t, s)`; curves and the right-hand side one degree further, because the
//! truncated operator needs `α'` and `f'` through `t^order`.

use crate::expr::{self, Bindings, Expr};
use crate::model::Problem;
use crate::{Dmat, Dvec};

use super::AsymptError;

/// Polynomial data of all problem ingredients at `(t, s) = (0, 0)`.
#[derive(Debug, Clone)]
pub struct TaylorData {
    pub m: usize,
    pub n: usize,
    pub order: usize,
    /// `kernel[i][nu][mu]` is the coefficient of `t^nu s^mu` of piece i+1,
    /// for `nu + mu <= order`.
    pub kernel: Vec<Vec<Vec<Dmat>>>,
    /// Coefficients of `f`, degrees `0..=order+1` (the zeroth vanishes for a
    /// valid problem).
    pub f: Vec<Dvec>,
    /// `alpha[i][nu]`, curve i+1, degrees `0..=order+1`.
    pub alpha: Vec<Vec<f64>>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0f64, |p, q| p * q as f64)
}

fn eval_at_origin(e: &Expr, what: &str) -> Result<f64, AsymptError> {
    let b = Bindings::new().set("t", 0.0).set("s", 0.0);
    expr::eval(e, &b).map_err(|source| AsymptError::NonSmooth {
        what: what.to_string(),
        source,
    })
}

/// Compute Taylor data through the stated order.
pub fn taylor_data(p: &Problem, order: usize) -> Result<TaylorData, AsymptError> {
    let m = p.m;

    let mut kernel = Vec::with_capacity(p.n);
    for (pi, piece) in p.pieces.iter().enumerate() {
        let mut by_nu_mu: Vec<Vec<Dmat>> = Vec::with_capacity(order + 1);
        // reuse t-derivatives across the mu loop, entry by entry
        let mut t_derivs: Vec<Vec<Vec<Expr>>> = vec![piece.entries.clone()];
        for nu in 1..=order {
            let prev = &t_derivs[nu - 1];
            let next: Vec<Vec<Expr>> = prev
                .iter()
                .map(|row| row.iter().map(|e| expr::differentiate(e, "t")).collect())
                .collect();
            t_derivs.push(next);
        }
        for nu in 0..=order {
            let mut by_mu = Vec::with_capacity(order + 1 - nu);
            let mut cur: Vec<Vec<Expr>> = t_derivs[nu].clone();
            for mu in 0..=(order - nu) {
                if mu > 0 {
                    cur = cur
                        .iter()
                        .map(|row| row.iter().map(|e| expr::differentiate(e, "s")).collect())
                        .collect();
                }
                let mut coeff = Dmat::zeros(m, m);
                for r in 0..m {
                    for c in 0..m {
                        let v = eval_at_origin(
                            &cur[r][c],
                            &format!("kernel piece {} entry ({r},{c})", pi + 1),
                        )?;
                        coeff[(r, c)] = v / (factorial(nu) * factorial(mu));
                    }
                }
                by_mu.push(coeff);
            }
            by_nu_mu.push(by_mu);
        }
        kernel.push(by_nu_mu);
    }

    let mut f = Vec::with_capacity(order + 2);
    {
        let mut cur: Vec<Expr> = p.f.clone();
        for nu in 0..=order + 1 {
            if nu > 0 {
                cur = cur.iter().map(|e| expr::differentiate(e, "t")).collect();
            }
            let mut v = Dvec::zeros(m);
            for r in 0..m {
                v[r] = eval_at_origin(&cur[r], &format!("f[{r}]"))? / factorial(nu);
            }
            f.push(v);
        }
    }

    let mut alpha = Vec::with_capacity(p.n.saturating_sub(1));
    for (ci, curve) in p.boundaries.iter().enumerate() {
        let mut coeffs = Vec::with_capacity(order + 2);
        let mut cur = curve.alpha.clone();
        for nu in 0..=order + 1 {
            if nu > 0 {
                cur = expr::differentiate(&cur, "t");
            }
            coeffs.push(eval_at_origin(&cur, &format!("alpha[{}]", ci + 1))? / factorial(nu));
        }
        alpha.push(coeffs);
    }

    Ok(TaylorData {
        m,
        n: p.n,
        order,
        kernel,
        f,
        alpha,
    })
}

impl TaylorData {
    /// Coefficient of `t^q` in `K_n(t, t)`.
    pub fn kn_diag_coeff(&self, q: usize) -> Dmat {
        let mut out = Dmat::zeros(self.m, self.m);
        let piece = &self.kernel[self.n - 1];
        for nu in 0..=q.min(self.order) {
            let mu = q - nu;
            if mu <= self.order - nu {
                out += &piece[nu][mu];
            }
        }
        out
    }

    /// Sampled sanity check: the stored polynomials reproduce the problem
    /// near the origin to the expected order (errors shrink like `t^{order+1}`
    /// under halving). Used by tests.
    #[cfg(test)]
    pub fn check_against(&self, p: &Problem, t: f64) -> f64 {
        let mut worst = 0.0f64;
        for i in 1..p.n {
            let exact = p.alpha(i, t).unwrap();
            let approx: f64 = self.alpha[i - 1]
                .iter()
                .enumerate()
                .map(|(nu, c)| c * t.powi(nu as i32))
                .sum();
            worst = worst.max((exact - approx).abs());
        }
        let exact = p.f_eval(t).unwrap();
        let mut approx = Dvec::zeros(self.m);
        for (nu, c) in self.f.iter().enumerate() {
            approx += c * t.powi(nu as i32);
        }
        worst = worst.max((exact - approx).amax());
        for i in 1..=p.n {
            let s = 0.5 * t;
            let exact = p.piece_eval(i, t, s).unwrap();
            let mut approx = Dmat::zeros(self.m, self.m);
            for (nu, by_mu) in self.kernel[i - 1].iter().enumerate() {
                for (mu, c) in by_mu.iter().enumerate() {
                    approx += c * (t.powi(nu as i32) * s.powi(mu as i32));
                }
            }
            worst = worst.max((exact - approx).amax());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{problem_p1, Problem};

    #[test]
    fn p1_taylor_values() {
        let p = problem_p1();
        let td = taylor_data(&p, 3).unwrap();
        // f = 3t/2: only the linear coefficient survives
        assert!((td.f[1][0] - 1.5).abs() < 1e-14);
        for nu in [0usize, 2, 3, 4] {
            assert!(td.f[nu][0].abs() < 1e-14, "f[{nu}] = {}", td.f[nu][0]);
        }
        // constant kernels: only K_{i00}
        assert_eq!(td.kernel[0][0][0][(0, 0)], 2.0);
        assert_eq!(td.kernel[1][0][0][(0, 0)], 1.0);
        assert_eq!(td.kernel[0][1][0][(0, 0)], 0.0);
        // alpha = t/2
        assert!((td.alpha[0][1] - 0.5).abs() < 1e-14);
        assert!(td.alpha[0][2].abs() < 1e-14);
    }

    #[test]
    fn polynomial_curve_coefficients() {
        let p = Problem::scalar(1.0, &["t/2 + t^2"], &["2", "1"], "t").unwrap();
        let td = taylor_data(&p, 3).unwrap();
        assert!((td.alpha[0][1] - 0.5).abs() < 1e-14);
        assert!((td.alpha[0][2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn transcendental_data_reproduces_functions() {
        let p = Problem::scalar(0.5, &["t/2"], &["exp(t - s)", "cos(t*s) + 1"], "sin(t)").unwrap();
        let td = taylor_data(&p, 4).unwrap();
        let e1 = td.check_against(&p, 0.02);
        let e2 = td.check_against(&p, 0.01);
        // order-4 data: halving t divides the remainder by about 2^5
        let ratio = e1 / e2.max(1e-300);
        assert!(
            ratio > 20.0,
            "remainder ratio {ratio} (e1={e1:.3e}, e2={e2:.3e})"
        );
    }

    #[test]
    fn non_smooth_input_is_reported() {
        let p = Problem::scalar(1.0, &["t/2"], &["2", "1"], "sqrt(t)*t").unwrap();
        assert!(matches!(
            taylor_data(&p, 3),
            Err(AsymptError::NonSmooth { .. })
        ));
    }
}
