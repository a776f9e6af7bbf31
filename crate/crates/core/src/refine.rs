//! Refinement of an asymptotic family into a full solution:
//! `x(t) = x̂(t) + t^{N*} u(t)` on `(0, T']`, continued to `[0, T]` by the
//! step method when the contraction bound holds past `T'`.
//!
//! Substituting the split into the differentiated equation leaves a linear
//! functional-integral equation for `u` in which the delayed terms carry
//! `(α_i(t)/t)^{N*}` weights and the integral a `(s/t)^{N*}` weight; with
//! `N*` from the weighted condition the functional part is a contraction
//! outright, and the integral part becomes one in the exponentially weighted
//! norm `‖u‖_l = max e^{−lt}‖u(t)‖` for large enough `l`. The iteration is
//! plain successive approximation; `l` is escalated by doubling until the
//! observed contraction factor clears the shown margin.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::asympt::{self, Assignment, AsymptError, LogPowerExpansion};
use crate::conditions::{self, ConditionsError, NStarReport};
use crate::model::{self, ModelError, Problem, RegionIndex};
use crate::stepper::{self, GridSolution, StepperError};
use crate::{Dmat, Dvec};

/// Grid functions on `(0, T']` need a positive left endpoint; this is it.
pub const DEFAULT_T_MIN: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conditions(#[from] ConditionsError),
    #[error(transparent)]
    Asympt(#[from] AsymptError),
    #[error(transparent)]
    Stepper(#[from] StepperError),
    #[error("constant term grows unboundedly toward t_min (‖γ({t:.3e})‖ = {norm:.3e}); the expansion order is below N*")]
    GammaUnbounded { t: f64, norm: f64 },
    #[error("iteration not contracting even at weight l = {l:.3e} (ratio {ratio:.3})")]
    NonContractive { l: f64, ratio: f64 },
    #[error("max_iter = {max_iter} exceeded, weighted diff {last_diff:.3e}")]
    MaxIterExceeded { max_iter: usize, last_diff: f64 },
    #[error("expansion order {n} is below the required weight order N* = {n_star}")]
    OrderTooLow { n: usize, n_star: u32 },
    #[error("continuation past T' is unjustified: sampled contraction bound is {q:.3} >= 1")]
    ContinuationUnjustified { q: f64 },
}

/// The exponentially weighted norm `‖u‖_l = max_k e^{−l t_k} ‖u(t_k)‖`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WeightedNorm {
    pub l: f64,
}

impl WeightedNorm {
    pub fn eval(&self, nodes: &[f64], values: &[Dvec]) -> f64 {
        nodes
            .iter()
            .zip(values)
            .map(|(&t, v)| (-self.l * t).exp() * v.amax())
            .fold(0.0, f64::max)
    }

    fn eval_profile(&self, nodes: &[f64], profile: &[f64]) -> f64 {
        nodes
            .iter()
            .zip(profile)
            .map(|(&t, p)| (-self.l * t).exp() * p)
            .fold(0.0, f64::max)
    }
}

/// Iteration record of the correction solve.
#[derive(Debug, Clone, Serialize, Default)]
pub struct CorrectionMeta {
    pub iterations: usize,
    pub weight_l: f64,
    pub last_ratio: f64,
    pub achieved_weighted: f64,
    pub achieved_sup: f64,
}

/// One member of the parametric solution family.
#[derive(Debug, Clone)]
pub struct ParametricSolution {
    pub expansion: LogPowerExpansion,
    pub assignment: Assignment,
    pub n_star: u32,
    pub t_prime: f64,
    /// The correction on `[t_min, T']`.
    pub u: GridSolution,
    /// Combined (and continued) values on `[t_min, T]`.
    pub solution: GridSolution,
    pub meta: CorrectionMeta,
    params: Vec<f64>,
    t_min: f64,
}

impl ParametricSolution {
    /// Evaluate the solution at `t > 0`: the expansion plus the weighted
    /// correction below `T'`, the continuation interpolant above.
    pub fn eval(&self, t: f64) -> Dvec {
        if t <= self.t_prime {
            let te = t.max(1e-300);
            self.expansion.eval_with(te, &self.params)
                + self.u.eval(t) * te.powi(self.n_star as i32)
        } else {
            self.solution.eval(t)
        }
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    /// Max first-kind residual over the given check points, with the
    /// solution read through [`ParametricSolution::eval`] (the expansion part
    /// is analytic, so quadrature accuracy is not limited by the grid).
    pub fn residual_first_kind(
        &self,
        p: &Problem,
        check_points: &[f64],
        quad_tol: f64,
    ) -> Result<f64, RefineError> {
        let x = |s: f64| self.eval(s);
        let mut worst = 0.0f64;
        for &t in check_points {
            let r = model::first_kind_residual(p, &x, t, quad_tol)?;
            worst = worst.max(r.amax());
        }
        Ok(worst)
    }
}

/// `γ(t) = K_n^{-1}(t,t) F(x̂(t)) / t^{N*}`, the constant term of the
/// correction equation up to sign. Stays bounded toward `t → 0` exactly when
/// the expansion order reaches `N*`.
pub fn residual_gamma(
    p: &Problem,
    expansion: &LogPowerExpansion,
    assignment: &Assignment,
    n_star: u32,
    t: f64,
) -> Result<Dvec, RefineError> {
    let params = expansion.params_from(assignment)?;
    let x = |s: f64| expansion.eval_with(s.max(1e-300), &params);
    let f = model::functional_residual(p, &x, t, 1e-13)?;
    let lu = p.kn_tt_lu(t)?;
    Ok(lu.solve(&f).expect("nonsingular by kn_tt_lu") / t.powi(n_star as i32))
}

/// Options for the correction iteration and the full pipeline.
#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub t_min: f64,
    pub grid: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed epsilon for the weight-order report; `None` selects from a
    /// ladder, preferring the largest admissible prefix.
    pub eps: Option<f64>,
    /// Override the computed `N*`.
    pub n_star_override: Option<u32>,
    pub samples: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            t_min: DEFAULT_T_MIN,
            grid: 384,
            tol: 1e-10,
            max_iter: 200,
            eps: None,
            n_star_override: None,
            samples: 512,
        }
    }
}

/// Select the weight order: fixed `eps` when given, otherwise the ladder
/// value admitting the largest prefix `T'` (ties favor smaller eps).
pub fn select_n_star(p: &Problem, opts: &RefineOptions) -> Result<NStarReport, RefineError> {
    if let Some(eps) = opts.eps {
        return Ok(conditions::compute_n_star(p, eps, opts.samples)?);
    }
    let mut best: Option<NStarReport> = None;
    let mut last_err = None;
    for eps in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95] {
        match conditions::compute_n_star(p, eps, opts.samples) {
            Ok(rep) => {
                let better = best
                    .as_ref()
                    .map_or(true, |b| rep.t_prime > b.t_prime * (1.0 + 1e-9));
                if better {
                    best = Some(rep);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(rep) => Ok(rep),
        None => Err(last_err.expect("ladder nonempty").into()),
    }
}

/// Geometric-then-uniform grid on `[t_min, t_prime]`.
fn refine_grid(t_min: f64, t_prime: f64, count: usize) -> Vec<f64> {
    let count = count.max(16);
    if t_prime <= t_min * 20.0 {
        return (0..=count)
            .map(|k| t_min + (t_prime - t_min) * k as f64 / count as f64)
            .collect();
    }
    let crossover = (t_prime / 10.0).max(t_min * 10.0);
    let n_geo = count / 2;
    let n_uni = count - n_geo;
    let mut nodes = Vec::with_capacity(count + 1);
    for k in 0..=n_geo {
        nodes.push(t_min * (crossover / t_min).powf(k as f64 / n_geo as f64));
    }
    for k in 1..=n_uni {
        nodes.push(crossover + (t_prime - crossover) * k as f64 / n_uni as f64);
    }
    nodes.dedup_by(|a, b| (*a - *b).abs() <= f64::EPSILON * b.abs());
    nodes
}

fn pl_eval(nodes: &[f64], values: &[Dvec], t: f64) -> Dvec {
    let n = nodes.len();
    if t <= nodes[0] {
        return values[0].clone();
    }
    if t >= nodes[n - 1] {
        return values[n - 1].clone();
    }
    let idx = match nodes.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(i) => return values[i].clone(),
        Err(i) => i,
    };
    let (t0, t1) = (nodes[idx - 1], nodes[idx]);
    let w = (t - t0) / (t1 - t0);
    &values[idx - 1] * (1.0 - w) + &values[idx] * w
}

/// Per-node precomputed data for the correction iteration.
struct NodeData {
    /// Weighted, normalized delayed-term matrices with their arguments.
    delays: Vec<(f64, Dmat)>,
    /// Trapezoid panels (s, weight matrix) including the `(s/t)^{N*}` weight.
    panels: Vec<(f64, Dmat)>,
    /// −γ(t).
    neg_gamma: Dvec,
}

/// Solve the correction equation `u + (L + K)u = −γ` on `[t_min, T']` by
/// successive approximations in the weighted norm.
pub fn iterate_u(
    p: &Problem,
    expansion: &LogPowerExpansion,
    assignment: &Assignment,
    n_star: u32,
    t_prime: f64,
    opts: &RefineOptions,
) -> Result<(GridSolution, CorrectionMeta), RefineError> {
    let params = expansion.params_from(assignment)?;
    let nodes = refine_grid(opts.t_min, t_prime, opts.grid);
    let xh = |s: f64| expansion.eval_with(s.max(1e-300), &params);

    let mut data = Vec::with_capacity(nodes.len());
    let mut xhat_norms = Vec::with_capacity(nodes.len());
    for &t in &nodes {
        xhat_norms.push(xh(t).amax());
        let lu = p.kn_tt_lu(t)?;
        let mut delays = Vec::with_capacity(p.n - 1);
        for (idx, c) in p.jump_coeffs(t)?.into_iter().enumerate() {
            let ai = p.alpha(idx + 1, t)?;
            let weight = (ai / t).powi(n_star as i32);
            let mat = lu.solve(&c).expect("nonsingular by kn_tt_lu") * weight;
            delays.push((ai, mat));
        }

        // trapezoid panels over the solution grid, split at the curves
        let mut cuts: Vec<f64> = Vec::new();
        let floor = crate::quad::ORIGIN_FLOOR;
        cuts.push(floor.min(t));
        for &g in &nodes {
            if g > floor && g < t {
                cuts.push(g);
            }
        }
        for i in 1..p.n {
            let ai = p.alpha(i, t)?;
            if ai > floor && ai < t {
                cuts.push(ai);
            }
        }
        cuts.push(t);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() <= f64::EPSILON * t.max(1.0));
        let mut panels = Vec::new();
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 0.0 {
                continue;
            }
            let RegionIndex(i) = p.locate(t, 0.5 * (a + b))?;
            let half = 0.5 * (b - a);
            for &s in &[a, b] {
                let g = lu
                    .solve(&p.piece_dt_eval(i, t, s)?)
                    .expect("nonsingular by kn_tt_lu");
                panels.push((s, g * (half * (s / t).powi(n_star as i32))));
            }
        }

        let f = model::functional_residual(p, &xh, t, 0.1 * opts.tol)?;
        let gamma = lu.solve(&f).expect("nonsingular by kn_tt_lu") / t.powi(n_star as i32);
        data.push(NodeData {
            delays,
            panels,
            neg_gamma: -gamma,
        });
    }

    // boundedness check on γ: near t_min the evaluation noise of F(x̂) is
    // itself divided by t^{N*}, so γ is only flagged when it exceeds that
    // floor by orders of magnitude AND dwarfs the values away from zero
    {
        let mid = nodes[nodes.len() / 2];
        let rest_max = nodes
            .iter()
            .zip(&data)
            .filter(|(&t, _)| t >= mid)
            .map(|(_, d)| d.neg_gamma.amax())
            .fold(0.0f64, f64::max);
        for ((&t, d), xn) in nodes.iter().zip(&data).zip(&xhat_norms) {
            if t > 100.0 * opts.t_min {
                continue;
            }
            let g = d.neg_gamma.amax();
            let noise_floor = (0.1 * opts.tol + 3e-15 * (1.0 + xn)) / t.powi(n_star as i32);
            if g > 1e3 * noise_floor && g > 10.0 * rest_max {
                return Err(RefineError::GammaUnbounded { t, norm: g });
            }
        }
    }

    let mut cur: Vec<Dvec> = data.iter().map(|d| d.neg_gamma.clone()).collect();
    let mut norm = WeightedNorm { l: 0.0 };
    let l_cap = 2.0f64.powi(16) / t_prime;
    let mut last_profile: Option<Vec<f64>> = None;
    let mut last_ratio = 0.0;
    for iter in 1..=opts.max_iter {
        let mut next = Vec::with_capacity(nodes.len());
        for d in &data {
            let mut v = d.neg_gamma.clone();
            for (ai, mat) in &d.delays {
                v -= mat * pl_eval(&nodes, &cur, *ai);
            }
            for (s, w) in &d.panels {
                v -= w * pl_eval(&nodes, &cur, *s);
            }
            next.push(v);
        }
        let profile: Vec<f64> = next.iter().zip(&cur).map(|(a, b)| (a - b).amax()).collect();
        let weighted = norm.eval_profile(&nodes, &profile);
        let sup = profile.iter().copied().fold(0.0, f64::max);
        cur = next;

        if weighted <= opts.tol {
            let mut u = GridSolution::new(nodes, cur);
            u.meta.h = t_prime;
            let meta = CorrectionMeta {
                iterations: iter,
                weight_l: norm.l,
                last_ratio,
                achieved_weighted: weighted,
                achieved_sup: sup,
            };
            return Ok((u, meta));
        }

        if let Some(prev) = &last_profile {
            let prev_weighted = norm.eval_profile(&nodes, prev);
            if prev_weighted > 0.0 {
                last_ratio = weighted / prev_weighted;
                if iter >= 3 && last_ratio > 0.98 {
                    // escalate the weight until the observed factor clears
                    let next_l = if norm.l == 0.0 {
                        1.0 / t_prime
                    } else {
                        2.0 * norm.l
                    };
                    if next_l > l_cap {
                        return Err(RefineError::NonContractive {
                            l: norm.l,
                            ratio: last_ratio,
                        });
                    }
                    norm.l = next_l;
                }
            }
        }
        last_profile = Some(profile);
    }
    Err(RefineError::MaxIterExceeded {
        max_iter: opts.max_iter,
        last_diff: last_profile
            .map(|p| norm.eval_profile(&nodes, &p))
            .unwrap_or(f64::NAN),
    })
}

/// Build the full parametric solution: expansion of order `n`, weight-order
/// selection, correction on `(0, T']`, continuation to `[0, T]`.
pub fn full_solution(
    p: &Problem,
    assignment: &Assignment,
    n: usize,
    opts: &RefineOptions,
) -> Result<ParametricSolution, RefineError> {
    let expansion = asympt::build_expansion(p, n)?;
    full_solution_with_expansion(p, expansion, assignment, opts)
}

pub fn full_solution_with_expansion(
    p: &Problem,
    expansion: LogPowerExpansion,
    assignment: &Assignment,
    opts: &RefineOptions,
) -> Result<ParametricSolution, RefineError> {
    let report = select_n_star(p, opts)?;
    let n_star = opts.n_star_override.unwrap_or(report.n_star);
    if expansion.order < n_star as usize {
        return Err(RefineError::OrderTooLow {
            n: expansion.order,
            n_star,
        });
    }
    let t_prime = report.t_prime;
    let params = expansion.params_from(assignment)?;

    let (u, meta) = iterate_u(p, &expansion, assignment, n_star, t_prime, opts)?;

    // combined values on [t_min, T']
    let mut nodes = u.nodes.clone();
    let mut values: Vec<Dvec> = u
        .nodes
        .iter()
        .zip(&u.values)
        .map(|(&t, uv)| expansion.eval_with(t, &params) + uv * t.powi(n_star as i32))
        .collect();

    // continuation to [0, T] by the step method, if there is ground left
    let horizon = p.horizon;
    if t_prime < horizon * (1.0 - 1e-12) {
        // contraction must persist past T'; this is checked, not assumed
        let samples = opts.samples.max(64);
        let mut q_tail = 0.0f64;
        for k in 0..=samples {
            let t = t_prime + (horizon - t_prime) * k as f64 / samples as f64;
            q_tail = q_tail.max(conditions::cap_d(p, t)?);
        }
        if q_tail >= 1.0 {
            return Err(RefineError::ContinuationUnjustified { q: q_tail });
        }
        let rep = conditions::check_condition_a(p, opts.samples)?;
        let mut h = 0.9 * (1.0 - q_tail) / rep.c.max(1e-300);
        h = h.min(horizon - t_prime);
        // ensure delayed arguments stay behind each interval start
        'shrink: for _ in 0..12 {
            let mut t = t_prime;
            while t < horizon {
                let b = (t + h).min(horizon);
                for k in 0..=16 {
                    let tt = t + (b - t) * k as f64 / 16.0;
                    for i in 1..p.n {
                        if p.alpha(i, tt)? > t + 1e-12 {
                            h *= 0.5;
                            continue 'shrink;
                        }
                    }
                }
                t = b;
            }
            break;
        }
        let form = stepper::build_second_kind(p)?;
        let target_dt = (horizon - t_prime) / (opts.grid.max(16) as f64);
        let mut t = t_prime;
        while t < horizon * (1.0 - 1e-12) {
            let b = (t + h).min(horizon);
            let (in_nodes, in_values, _im) = stepper::advance(
                &form,
                &nodes,
                &values,
                (t, b),
                target_dt,
                opts.tol,
                opts.max_iter,
            )?;
            nodes.extend_from_slice(&in_nodes[1..]);
            values.extend_from_slice(&in_values[1..]);
            t = b;
        }
    }

    let solution = GridSolution::new(nodes, values);
    Ok(ParametricSolution {
        expansion,
        assignment: assignment.clone(),
        n_star,
        t_prime,
        u,
        solution,
        meta,
        params,
        t_min: opts.t_min,
    })
}

/// Convenience: named assignment from `(name, value)` pairs.
pub fn assignment_of(pairs: &[(&str, f64)]) -> Assignment {
    let mut a = BTreeMap::new();
    for (k, v) in pairs {
        a.insert(k.to_string(), *v);
    }
    a
}
