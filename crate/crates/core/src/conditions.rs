//! Solvability conditions and step planning for the differentiated form.
//!
//! `D(t)` measures the combined strength of the functional ("delayed") terms
//! after normalization by `K_n(t,t)^{-1}`; `D(0) < 1` together with a finite
//! normalized-kernel bound `c` makes the second-kind form contractive on a
//! short initial interval, which is what the step method needs to start.
//! All suprema here are dense-grid surrogates of the analytic bounds, with a
//! 0.9 safety factor where a sampled maximum could undershoot the true one.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::spectral_norm;
use crate::model::{ModelError, Problem, RegionIndex};

#[derive(Debug, Error)]
pub enum ConditionsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contraction condition does not hold (D(0) = {d0})")]
    ContractionFails { d0: f64 },
    #[error("no sampled positive prefix keeps D below 1; refine the sample grid")]
    EmptyContractionPrefix,
    #[error("no admissible interval scale: epsilon would drop below 2^-10")]
    NoAdmissibleEpsilon,
    #[error("no prefix of [0, T] satisfies the slope bounds for epsilon = {eps}")]
    NoAdmissiblePrefix { eps: f64 },
}

/// Report of the initial-contraction condition.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionAReport {
    /// D(0).
    pub d0: f64,
    /// max of D on [0, h1].
    pub q: f64,
    /// sampled sup of ‖K_n(t,t)^{-1} K(t,s)‖ over the triangle.
    pub c: f64,
    /// largest sampled prefix of [0, T] on which D stays below 1.
    pub h1: f64,
    pub holds: bool,
}

/// Interval plan for the step method.
#[derive(Debug, Clone, Serialize)]
pub struct StepPlan {
    pub h: f64,
    pub epsilon: f64,
    /// Consecutive intervals tiling [0, T] exactly.
    pub intervals: Vec<(f64, f64)>,
}

/// Weight order selection for the refinement stage.
#[derive(Debug, Clone, Serialize)]
pub struct NStarReport {
    pub epsilon: f64,
    /// Prefix of [0, T] on which both slope bounds hold.
    pub t_prime: f64,
    pub n_star: u32,
    /// Attained sampled sup of the weighted functional bound; stays <= 0.9.
    pub q_d: f64,
}

/// The contraction function
/// `D(t) = Σ_i |α_i'(t)| ‖K_n(t,t)^{-1}(K_i − K_{i+1})(t, α_i(t))‖₂`.
pub fn cap_d(p: &Problem, t: f64) -> Result<f64, ConditionsError> {
    let lu = p.kn_tt_lu(t)?;
    let mut total = 0.0;
    for i in 1..p.n {
        let ai = p.alpha(i, t)?;
        let api = p.alpha_prime(i, t)?;
        let diff = p.piece_eval(i, t, ai)? - p.piece_eval(i + 1, t, ai)?;
        let normalized = lu.solve(&diff).expect("nonsingular by kn_tt_lu");
        total += api.abs() * spectral_norm(&normalized);
    }
    Ok(total)
}

/// Check the initial contraction condition on a `samples`-point grid.
/// Failure is a report, not an error; only evaluation problems error out.
pub fn check_condition_a(p: &Problem, samples: usize) -> Result<ConditionAReport, ConditionsError> {
    let samples = samples.max(16);
    let ts: Vec<f64> = (0..=samples)
        .map(|k| p.horizon * k as f64 / samples as f64)
        .collect();

    let mut d_vals = Vec::with_capacity(ts.len());
    for &t in &ts {
        d_vals.push(cap_d(p, t)?);
    }
    let d0 = d_vals[0];

    // largest sampled prefix on which D < 1
    let mut h1 = 0.0;
    let mut q = d0;
    if d0 < 1.0 {
        for (k, &d) in d_vals.iter().enumerate() {
            if d < 1.0 {
                h1 = ts[k];
                q = q.max(d);
            } else {
                break;
            }
        }
    }

    // c = sup of the normalized kernel norm over the closed triangle; both
    // one-sided limits are sampled on every interior curve.
    let mut c = 0.0f64;
    let s_samples = (samples / 8).clamp(16, 128);
    let mut finite = true;
    for &t in ts.iter().skip(1) {
        let lu = p.kn_tt_lu(t)?;
        let mut consider = |k: Result<crate::Dmat, ModelError>| -> Result<(), ConditionsError> {
            let k = k?;
            let normalized = lu.solve(&k).expect("nonsingular by kn_tt_lu");
            let v = spectral_norm(&normalized);
            if !v.is_finite() {
                finite = false;
            }
            c = c.max(v);
            Ok(())
        };
        for k in 0..=s_samples {
            let s = t * k as f64 / s_samples as f64;
            let RegionIndex(i) = p.locate(t, s)?;
            consider(p.piece_eval(i, t, s))?;
        }
        for i in 1..p.n {
            let s = p.alpha(i, t)?;
            consider(p.piece_eval(i, t, s))?;
            consider(p.piece_eval(i + 1, t, s))?;
        }
    }

    Ok(ConditionAReport {
        d0,
        q,
        c,
        h1,
        holds: d0 < 1.0 && finite,
    })
}

/// Pick the step `h` and interval scale `epsilon`, and tile `[0, T]`.
///
/// `h = 0.9·min{h1, (1−q)/c}`; `epsilon` is the largest value in
/// `{1, 1/2, 1/4, …}` for which every delayed argument sampled on interval
/// `I_k` falls into earlier intervals.
pub fn plan_steps(p: &Problem, rep: &ConditionAReport) -> Result<StepPlan, ConditionsError> {
    if !rep.holds {
        return Err(ConditionsError::ContractionFails { d0: rep.d0 });
    }
    if rep.h1 <= 0.0 {
        return Err(ConditionsError::EmptyContractionPrefix);
    }
    let mut h = 0.9 * rep.h1.min((1.0 - rep.q) / rep.c.max(1e-300));
    h = h.min(p.horizon);

    let mut epsilon = 1.0f64;
    loop {
        let intervals = tile(p.horizon, h, epsilon);
        if inclusion_holds(p, &intervals)? {
            return Ok(StepPlan {
                h,
                epsilon,
                intervals,
            });
        }
        epsilon *= 0.5;
        if epsilon < 2.0f64.powi(-10) {
            return Err(ConditionsError::NoAdmissibleEpsilon);
        }
    }
}

fn tile(horizon: f64, h: f64, epsilon: f64) -> Vec<(f64, f64)> {
    let mut intervals = vec![(0.0, h.min(horizon))];
    let mut t = h;
    while t < horizon {
        let next = (t + epsilon * h).min(horizon);
        intervals.push((t, next));
        t = next;
    }
    intervals
}

/// Sampled check that delayed arguments on each interval land strictly in
/// already-covered ground (`α_i(t) ≤` interval start, up to rounding).
fn inclusion_holds(p: &Problem, intervals: &[(f64, f64)]) -> Result<bool, ConditionsError> {
    const POINTS: usize = 33;
    for &(a, b) in intervals.iter().skip(1) {
        for k in 0..=POINTS {
            let t = a + (b - a) * k as f64 / POINTS as f64;
            for i in 1..p.n {
                let ai = p.alpha(i, t)?;
                if ai > a + 1e-12 * p.horizon.max(1.0) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Find the weight order `N*`: the smallest integer such that the sampled
/// sup of `eps^{N*} · D(t)` over the admissible prefix stays at or below 0.9.
pub fn compute_n_star(
    p: &Problem,
    eps: f64,
    samples: usize,
) -> Result<NStarReport, ConditionsError> {
    assert!(eps > 0.0 && eps < 1.0, "eps must lie in (0, 1)");
    let samples = samples.max(16);
    let ts: Vec<f64> = (1..=samples)
        .map(|k| p.horizon * k as f64 / samples as f64)
        .collect();

    // largest prefix with max_i |alpha_i'(t)| <= eps and alpha_i(t)/t <= eps
    let mut t_prime = 0.0f64;
    for &t in &ts {
        let mut ok = true;
        for i in 1..p.n {
            let slope = p.alpha_prime(i, t)?.abs();
            let ratio = p.alpha(i, t)? / t;
            if slope > eps || ratio > eps {
                ok = false;
                break;
            }
        }
        // the limit of alpha_i(t)/t at 0 is alpha_i'(0); check it once up front
        if t_prime == 0.0 {
            for i in 1..p.n {
                if p.alpha_prime(i, 0.0)?.abs() > eps {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            t_prime = t;
        } else {
            break;
        }
    }
    if t_prime == 0.0 {
        return Err(ConditionsError::NoAdmissiblePrefix { eps });
    }

    let prefix_samples = samples.max(64);
    let mut sup_d = cap_d(p, 0.0)?;
    for k in 1..=prefix_samples {
        let t = t_prime * k as f64 / prefix_samples as f64;
        sup_d = sup_d.max(cap_d(p, t)?);
    }

    let mut n_star = 0u32;
    while eps.powi(n_star as i32) * sup_d > 0.9 {
        n_star += 1;
    }

    Ok(NStarReport {
        epsilon: eps,
        t_prime,
        n_star,
        q_d: eps.powi(n_star as i32) * sup_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{problem_p1, problem_p2};

    #[test]
    fn cap_d_hand_values() {
        let p1 = problem_p1();
        assert!((cap_d(&p1, 0.0).unwrap() - 0.5).abs() < 1e-12);
        let p2 = problem_p2();
        assert!((cap_d(&p2, 0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_d_vanishes_for_identical_pieces() {
        let p = crate::model::Problem::scalar(1.0, &["t/2"], &["2", "2"], "t").unwrap();
        assert!(cap_d(&p, 0.0).unwrap().abs() < 1e-14);
    }

    #[test]
    fn condition_a_on_p1() {
        let rep = check_condition_a(&problem_p1(), 64).unwrap();
        assert!(rep.holds);
        assert!((rep.d0 - 0.5).abs() < 1e-12);
        assert!((rep.c - 2.0).abs() < 1e-12);
        assert!((rep.q - 0.5).abs() < 1e-12);
        assert!((rep.h1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn condition_a_fails_on_p2() {
        let rep = check_condition_a(&problem_p2(), 64).unwrap();
        assert!(!rep.holds);
        assert!((rep.d0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_d_is_grid_continuous() {
        let p = crate::model::Problem::scalar(1.0, &["t/2"], &["2 + t*s", "1 + s"], "t").unwrap();
        let samples = 256;
        let mut prev = cap_d(&p, 0.0).unwrap();
        for k in 1..=samples {
            let t = k as f64 / samples as f64;
            let d = cap_d(&p, t).unwrap();
            assert!(
                (d - prev).abs() < 0.05,
                "jump of {} at t={t}",
                (d - prev).abs()
            );
            prev = d;
        }
    }

    #[test]
    fn plan_steps_p1() {
        let p = problem_p1();
        let rep = check_condition_a(&p, 64).unwrap();
        let plan = plan_steps(&p, &rep).unwrap();
        assert!((plan.h - 0.225).abs() < 1e-12);
        assert_eq!(plan.epsilon, 1.0);
        // intervals tile [0, T] with no gaps or overlaps
        assert_eq!(plan.intervals[0].0, 0.0);
        let last = plan.intervals.last().unwrap();
        assert!((last.1 - p.horizon).abs() < 1e-12);
        for w in plan.intervals.windows(2) {
            assert!((w[0].1 - w[1].0).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_steps_forces_smaller_epsilon_for_steep_curves() {
        // alpha' = 0.9 violates the inclusion for epsilon = 1
        let p = crate::model::Problem::scalar(1.0, &["0.9*t"], &["2", "1"], "t").unwrap();
        let rep = check_condition_a(&p, 64).unwrap();
        assert!(rep.holds);
        let plan = plan_steps(&p, &rep).unwrap();
        assert!(plan.epsilon < 1.0, "epsilon = {}", plan.epsilon);
    }

    #[test]
    fn plan_steps_requires_condition_a() {
        let p = problem_p2();
        let rep = check_condition_a(&p, 64).unwrap();
        assert!(plan_steps(&p, &rep).is_err());
    }

    #[test]
    fn n_star_on_p2() {
        let rep = compute_n_star(&problem_p2(), 0.5, 128).unwrap();
        assert_eq!(rep.n_star, 1);
        assert!((rep.t_prime - 1.0).abs() < 1e-12);
        assert!(rep.q_d <= 0.9);
    }

    #[test]
    fn n_star_on_p1_is_zero() {
        let rep = compute_n_star(&problem_p1(), 0.5, 128).unwrap();
        assert_eq!(rep.n_star, 0);
    }

    #[test]
    fn n_star_monotone_in_eps() {
        let p = problem_p2();
        let mut prev = u32::MAX;
        for eps in [0.99, 0.9, 0.75, 0.6, 0.5] {
            let rep = compute_n_star(&p, eps, 64).unwrap();
            assert!(
                rep.n_star <= prev,
                "n_star jumped up at eps={eps}: {} > {prev}",
                rep.n_star
            );
            prev = rep.n_star;
        }
    }

    #[test]
    fn n_star_with_no_prefix_errors() {
        // slope 1/2 everywhere; eps below it admits no prefix
        let p = problem_p2();
        assert!(matches!(
            compute_n_star(&p, 0.3, 64),
            Err(ConditionsError::NoAdmissiblePrefix { .. })
        ));
    }
}
