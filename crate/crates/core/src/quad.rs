//! Quadrature helpers for the residual evaluators: composite trapezoid on
//! prescribed breakpoints and an adaptive Simpson rule for integrands with
//! integrable endpoint singularities (solutions may grow like `ln s` near 0).

use crate::Dvec;

/// Lower cutoff replacing an exact zero integration bound. Integrands here
/// are at worst logarithmic at the origin, so the neglected mass over
/// `[0, ORIGIN_FLOOR]` is far below solver tolerances.
pub const ORIGIN_FLOOR: f64 = 1e-12;

fn simpson(fa: &Dvec, fm: &Dvec, fb: &Dvec, h: f64) -> Dvec {
    (fa + fm * 4.0 + fb) * (h / 6.0)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_rec<F>(
    f: &mut F,
    a: f64,
    fa: &Dvec,
    b: f64,
    fb: &Dvec,
    whole: &Dvec,
    fm: &Dvec,
    tol: f64,
    depth: u32,
) -> Dvec
where
    F: FnMut(f64) -> Dvec,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, &flm, fm, m - a);
    let right = simpson(fm, &frm, fb, b - m);
    let refined = &left + &right;
    let err = (&refined - whole).amax();
    if err <= 15.0 * tol || depth == 0 {
        // Richardson correction term
        let correction = (&refined - whole) / 15.0;
        return refined + correction;
    }
    let l = adaptive_rec(f, a, fa, m, fm, &left, &flm, 0.5 * tol, depth - 1);
    let r = adaptive_rec(f, m, fm, b, fb, &right, &frm, 0.5 * tol, depth - 1);
    l + r
}

/// Adaptive Simpson integration of a vector-valued integrand over `[a, b]`.
/// `a` is clipped to [`ORIGIN_FLOOR`] so log-singular integrands stay finite.
pub fn adaptive<F>(mut f: F, a: f64, b: f64, dim: usize, tol: f64) -> Dvec
where
    F: FnMut(f64) -> Dvec,
{
    let a = a.max(ORIGIN_FLOOR.min(b));
    if b - a <= 0.0 {
        return Dvec::zeros(dim);
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(&fa, &fm, &fb, b - a);
    adaptive_rec(&mut f, a, &fa, b, &fb, &whole, &fm, tol, 32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_handles_log_singularity() {
        // ∫₀¹ ln s ds = -1
        let v = adaptive(|s| Dvec::from_vec(vec![s.ln()]), 0.0, 1.0, 1, 1e-10);
        assert!((v[0] + 1.0).abs() < 1e-8, "got {}", v[0]);
    }

    #[test]
    fn adaptive_smooth() {
        let v = adaptive(|s| Dvec::from_vec(vec![s.cos()]), 0.0, 1.0, 1, 1e-12);
        assert!((v[0] - 1.0f64.sin()).abs() < 1e-11);
    }
}
