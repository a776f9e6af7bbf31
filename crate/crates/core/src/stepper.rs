//! Step method combined with successive approximations.
//!
//! After dividing by `K_n(t,t)` the differentiated equation reads
//!
//! ```text
//! x(t) + Σ_i C_i(t) x(α_i(t)) + ∫₀ᵗ G(t,s) x(s) ds = f̄(t),
//! ```
//!
//! with `C_i(t) = α_i'(t) K_n^{-1}(t,t)(K_i − K_{i+1})(t,α_i(t))`,
//! `G(t,s) = K_n^{-1}(t,t) K^{(1)}(t,s)` and `f̄ = K_n^{-1}(t,t) f'(t)`.
//! On the initial interval the whole equation is contractive (condition A);
//! afterwards, intervals are chosen so every delayed argument points into
//! already-solved ground, and only the running integral is iterated.
//!
//! Quadrature is composite trapezoid over panels that are always split at the
//! boundary curves (kernels jump there), and history values are read through
//! piecewise-linear interpolation — both second order, which the manufactured
//! solution tests confirm.

use serde::Serialize;
use thiserror::Error;

use crate::conditions::{self, ConditionsError, StepPlan};
use crate::model::{ModelError, Problem, RegionIndex};
use crate::{Dmat, Dvec};

#[derive(Debug, Error)]
pub enum StepperError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conditions(#[from] ConditionsError),
    #[error("iteration did not contract (last diff {last_diff:.3e} after {iters} iterations); the contraction condition likely fails")]
    NonContractive { iters: usize, last_diff: f64 },
    #[error("max_iter = {max_iter} exceeded, last diff {last_diff:.3e}")]
    MaxIterExceeded { max_iter: usize, last_diff: f64 },
    #[error("delayed argument alpha_{i}({t}) = {alpha} exceeds interval start {start}; step plan violated")]
    PlanViolation {
        i: usize,
        t: f64,
        alpha: f64,
        start: f64,
    },
    #[error("csv: {0}")]
    Csv(String),
}

/// Default iteration tolerance on the sup-norm successive difference.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 200;

/// Per-interval iteration record.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalMeta {
    pub start: f64,
    pub end: f64,
    pub iterations: usize,
    pub achieved: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct SolveMeta {
    pub h: f64,
    pub epsilon: f64,
    pub intervals: Vec<IntervalMeta>,
}

/// A grid function on ascending nodes with one m-vector per node.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub nodes: Vec<f64>,
    pub values: Vec<Dvec>,
    pub meta: SolveMeta,
}

impl GridSolution {
    pub fn new(nodes: Vec<f64>, values: Vec<Dvec>) -> Self {
        debug_assert_eq!(nodes.len(), values.len());
        debug_assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        GridSolution {
            nodes,
            values,
            meta: SolveMeta::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// Piecewise-linear interpolant; clamps outside the covered range.
    pub fn eval(&self, t: f64) -> Dvec {
        let n = self.nodes.len();
        if n == 0 {
            return Dvec::zeros(0);
        }
        if t <= self.nodes[0] {
            return self.values[0].clone();
        }
        if t >= self.nodes[n - 1] {
            return self.values[n - 1].clone();
        }
        let idx = match self.nodes.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.values[i].clone(),
            Err(i) => i,
        };
        let (t0, t1) = (self.nodes[idx - 1], self.nodes[idx]);
        let w = (t - t0) / (t1 - t0);
        &self.values[idx - 1] * (1.0 - w) + &self.values[idx] * w
    }

    /// CSV serialization: header `t,x1,…,xm`, 17 significant digits per field.
    pub fn to_csv(&self) -> String {
        let m = self.dim();
        let mut out = String::from("t");
        for k in 1..=m {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        for (t, v) in self.nodes.iter().zip(&self.values) {
            out.push_str(&format!("{t:.16e}"));
            for k in 0..m {
                out.push_str(&format!(",{:.16e}", v[k]));
            }
            out.push('\n');
        }
        out
    }

    /// Parse a CSV document produced by [`GridSolution::to_csv`]. Leading
    /// `#`-comment lines are skipped.
    pub fn from_csv(text: &str) -> Result<GridSolution, StepperError> {
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        let mut dim: Option<usize> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('t') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(StepperError::Csv(format!(
                    "line {}: too few fields",
                    lineno + 1
                )));
            }
            let parse = |s: &str| -> Result<f64, StepperError> {
                s.trim().parse().map_err(|_| {
                    StepperError::Csv(format!("line {}: bad number `{s}`", lineno + 1))
                })
            };
            let t = parse(fields[0])?;
            let m = fields.len() - 1;
            if let Some(d) = dim {
                if d != m {
                    return Err(StepperError::Csv(format!(
                        "line {}: {m} components, expected {d}",
                        lineno + 1
                    )));
                }
            } else {
                dim = Some(m);
            }
            let mut v = Dvec::zeros(m);
            for k in 0..m {
                v[k] = parse(fields[k + 1])?;
            }
            nodes.push(t);
            values.push(v);
        }
        if nodes.is_empty() {
            return Err(StepperError::Csv("no data rows".to_string()));
        }
        Ok(GridSolution::new(nodes, values))
    }
}

/// The normalized second-kind form of a problem. Evaluation is on demand;
/// the step loops cache what they need per grid node.
pub struct SecondKindForm<'a> {
    pub problem: &'a Problem,
}

/// Build the second-kind form, verifying `K_n(t,t)` is invertible at both
/// ends of `[0, T]`.
pub fn build_second_kind(p: &Problem) -> Result<SecondKindForm<'_>, StepperError> {
    p.kn_tt_lu(0.0)?;
    p.kn_tt_lu(p.horizon)?;
    Ok(SecondKindForm { problem: p })
}

impl SecondKindForm<'_> {
    /// Normalized delayed-term coefficients `C_i(t)`, i = 1..n-1.
    pub fn functional_coeffs(&self, t: f64) -> Result<Vec<Dmat>, StepperError> {
        let lu = self.problem.kn_tt_lu(t)?;
        let mut out = Vec::new();
        for c in self.problem.jump_coeffs(t)? {
            out.push(lu.solve(&c).expect("nonsingular by kn_tt_lu"));
        }
        Ok(out)
    }

    /// Normalized integral kernel `G(t,s)` evaluated on the piece holding
    /// `(t,s)` (one-sided variant: [`SecondKindForm::integral_kernel_piece`]).
    pub fn integral_kernel(&self, t: f64, s: f64) -> Result<Dmat, StepperError> {
        let RegionIndex(i) = self.problem.locate(t, s)?;
        self.integral_kernel_piece(i, t, s)
    }

    pub fn integral_kernel_piece(&self, i: usize, t: f64, s: f64) -> Result<Dmat, StepperError> {
        let lu = self.problem.kn_tt_lu(t)?;
        let k = self.problem.piece_dt_eval(i, t, s)?;
        Ok(lu.solve(&k).expect("nonsingular by kn_tt_lu"))
    }

    /// Normalized right-hand side `f̄(t)`.
    pub fn rhs(&self, t: f64) -> Result<Dvec, StepperError> {
        let lu = self.problem.kn_tt_lu(t)?;
        let fp = self.problem.f_prime_eval(t)?;
        Ok(lu.solve(&fp).expect("nonsingular by kn_tt_lu"))
    }
}

/// Trapezoid panels for `∫_[lo, hi] G(t,·) x(·) ds`, split at every boundary
/// curve value `α_i(t)` so no panel straddles a kernel jump. Each panel
/// stores premultiplied endpoint weight matrices.
struct PanelSet {
    /// (s_left, s_right, W_left, W_right): contribution is
    /// W_left·x(s_left) + W_right·x(s_right).
    panels: Vec<(f64, f64, Dmat, Dmat)>,
}

impl PanelSet {
    fn build(
        form: &SecondKindForm<'_>,
        t: f64,
        lo: f64,
        hi: f64,
        grid: &[f64],
    ) -> Result<PanelSet, StepperError> {
        let p = form.problem;
        let mut cuts: Vec<f64> = vec![lo];
        for &g in grid {
            if g > lo && g < hi {
                cuts.push(g);
            }
        }
        for i in 1..p.n {
            let ai = p.alpha(i, t)?;
            if ai > lo && ai < hi {
                cuts.push(ai);
            }
        }
        cuts.push(hi);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() <= f64::EPSILON * t.abs().max(1.0));

        let lu = p.kn_tt_lu(t)?;
        let mut panels = Vec::with_capacity(cuts.len().saturating_sub(1));
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 0.0 {
                continue;
            }
            let RegionIndex(i) = p.locate(t, 0.5 * (a + b))?;
            let ga = lu
                .solve(&p.piece_dt_eval(i, t, a)?)
                .expect("nonsingular by kn_tt_lu");
            let gb = lu
                .solve(&p.piece_dt_eval(i, t, b)?)
                .expect("nonsingular by kn_tt_lu");
            let half = 0.5 * (b - a);
            panels.push((a, b, ga * half, gb * half));
        }
        Ok(PanelSet { panels })
    }

    fn apply<F: Fn(f64) -> Dvec>(&self, x: &F, dim: usize) -> Dvec {
        let mut acc = Dvec::zeros(dim);
        for (a, b, wa, wb) in &self.panels {
            acc += wa * x(*a) + wb * x(*b);
        }
        acc
    }
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

fn sup_diff(a: &[Dvec], b: &[Dvec]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

/// Uniform nodes on `[a, b]` at a spacing close to `target_dt`.
fn interval_nodes(a: f64, b: f64, target_dt: f64) -> Vec<f64> {
    let sub = (((b - a) / target_dt).ceil() as usize).max(1);
    (0..=sub)
        .map(|k| a + (b - a) * k as f64 / sub as f64)
        .collect()
}

/// Solve on the initial interval `[0, h]` by plain successive
/// approximations, starting from `x⁰ = f̄`. Both delayed and integral terms
/// reference the current iterate here. Returns (nodes, values, meta).
pub fn solve_initial(
    form: &SecondKindForm<'_>,
    plan: &StepPlan,
    target_dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, Vec<Dvec>, IntervalMeta), StepperError> {
    let p = form.problem;
    let h = plan.intervals[0].1;
    let nodes = interval_nodes(0.0, h, target_dt);
    let m = p.m;

    // per-node constants
    let mut fbar = Vec::with_capacity(nodes.len());
    let mut coeffs = Vec::with_capacity(nodes.len());
    let mut delays = Vec::with_capacity(nodes.len());
    let mut panels = Vec::with_capacity(nodes.len());
    for &t in &nodes {
        fbar.push(form.rhs(t)?);
        coeffs.push(form.functional_coeffs(t)?);
        let mut d = Vec::with_capacity(p.n - 1);
        for i in 1..p.n {
            d.push(p.alpha(i, t)?);
        }
        delays.push(d);
        panels.push(PanelSet::build(form, t, 0.0, t, &nodes)?);
    }

    let mut cur: Vec<Dvec> = fbar.clone();
    let mut last_diff = f64::INFINITY;
    let mut grow_streak = 0usize;
    for iter in 1..=max_iter {
        let mut next = Vec::with_capacity(nodes.len());
        for (k, &_t) in nodes.iter().enumerate() {
            let mut v = fbar[k].clone();
            for (c, &ai) in coeffs[k].iter().zip(&delays[k]) {
                v -= c * pl_eval(&nodes, &cur, ai);
            }
            v -= panels[k].apply(&|s| pl_eval(&nodes, &cur, s), m);
            next.push(v);
        }
        let diff = sup_diff(&next, &cur);
        cur = next;
        if diff <= tol {
            return Ok((
                nodes,
                cur,
                IntervalMeta {
                    start: 0.0,
                    end: h,
                    iterations: iter,
                    achieved: diff,
                },
            ));
        }
        if diff > last_diff {
            grow_streak += 1;
            if grow_streak >= 3 {
                return Err(StepperError::NonContractive {
                    iters: iter,
                    last_diff: diff,
                });
            }
        } else {
            grow_streak = 0;
        }
        last_diff = diff;
    }
    Err(StepperError::MaxIterExceeded {
        max_iter,
        last_diff,
    })
}

/// Advance onto `interval = (a, b]` given history covering `[0, a]`.
/// Delayed arguments must fall at or before `a` (guaranteed by the plan);
/// only the integral over `[a, t]` is iterated.
pub fn advance(
    form: &SecondKindForm<'_>,
    hist_nodes: &[f64],
    hist_values: &[Dvec],
    interval: (f64, f64),
    target_dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, Vec<Dvec>, IntervalMeta), StepperError> {
    let p = form.problem;
    let (a, b) = interval;
    let m = p.m;
    let nodes = interval_nodes(a, b, target_dt);
    let slack = 1e-12 * p.horizon.max(1.0);

    // fixed per-node right-hand sides referencing history only
    let mut rhs = Vec::with_capacity(nodes.len());
    let mut local_panels = Vec::with_capacity(nodes.len());
    for &t in &nodes {
        let mut v = form.rhs(t)?;
        let coeffs = form.functional_coeffs(t)?;
        for (idx, c) in coeffs.iter().enumerate() {
            let i = idx + 1;
            let ai = p.alpha(i, t)?;
            if ai > a + slack {
                return Err(StepperError::PlanViolation {
                    i,
                    t,
                    alpha: ai,
                    start: a,
                });
            }
            v -= c * pl_eval(hist_nodes, hist_values, ai);
        }
        let hist_panels = PanelSet::build(form, t, 0.0, a, hist_nodes)?;
        v -= hist_panels.apply(&|s| pl_eval(hist_nodes, hist_values, s), m);
        rhs.push(v);
        local_panels.push(PanelSet::build(form, t, a, t, &nodes)?);
    }

    let mut cur = rhs.clone();
    // continuity at the joint: the shared node keeps the history value
    cur[0] = hist_values.last().expect("nonempty history").clone();
    let mut last_diff = f64::INFINITY;
    let mut grow_streak = 0usize;
    for iter in 1..=max_iter {
        let mut next = Vec::with_capacity(nodes.len());
        for k in 0..nodes.len() {
            let mut v = rhs[k].clone();
            v -= local_panels[k].apply(&|s| pl_eval(&nodes, &cur, s), m);
            next.push(v);
        }
        let diff = sup_diff(&next, &cur);
        cur = next;
        if diff <= tol {
            return Ok((
                nodes,
                cur,
                IntervalMeta {
                    start: a,
                    end: b,
                    iterations: iter,
                    achieved: diff,
                },
            ));
        }
        if diff > last_diff {
            grow_streak += 1;
            if grow_streak >= 3 {
                return Err(StepperError::NonContractive {
                    iters: iter,
                    last_diff: diff,
                });
            }
        } else {
            grow_streak = 0;
        }
        last_diff = diff;
    }
    Err(StepperError::MaxIterExceeded {
        max_iter,
        last_diff,
    })
}

/// Full pipeline: contraction check, step plan, initial interval, then
/// interval-by-interval continuation over `[0, T]`.
pub fn solve(p: &Problem, grid_density: usize, tol: f64) -> Result<GridSolution, StepperError> {
    let rep = conditions::check_condition_a(p, 512)?;
    let plan = conditions::plan_steps(p, &rep)?;
    solve_with_plan(p, &plan, grid_density, tol, DEFAULT_MAX_ITER)
}

/// As [`solve`] but with an externally fixed plan and iteration cap.
pub fn solve_with_plan(
    p: &Problem,
    plan: &StepPlan,
    grid_density: usize,
    tol: f64,
    max_iter: usize,
) -> Result<GridSolution, StepperError> {
    let form = build_second_kind(p)?;
    let target_dt = p.horizon / (grid_density.max(2) as f64 - 1.0);

    let (mut nodes, mut values, meta0) = solve_initial(&form, plan, target_dt, tol, max_iter)?;
    let mut meta = SolveMeta {
        h: plan.h,
        epsilon: plan.epsilon,
        intervals: vec![meta0],
    };

    for &iv in plan.intervals.iter().skip(1) {
        let (in_nodes, in_values, im) =
            advance(&form, &nodes, &values, iv, target_dt, tol, max_iter)?;
        // first node is shared with the history tail
        nodes.extend_from_slice(&in_nodes[1..]);
        values.extend_from_slice(&in_values[1..]);
        meta.intervals.push(im);
    }

    let mut sol = GridSolution::new(nodes, values);
    sol.meta = meta;
    Ok(sol)
}

/// Max first-kind residual `‖Σ_i ∫ K_i(t,s) x(s) ds − f(t)‖_∞` of a grid
/// solution over a subsample of its own nodes. Integrals are trapezoid over
/// the solution nodes with mandatory splitting at the boundary curves.
pub fn residual_first_kind(p: &Problem, sol: &GridSolution) -> Result<f64, StepperError> {
    let n = sol.nodes.len();
    let stride = (n / 128).max(1);
    let mut worst = 0.0f64;
    for (k, &t) in sol.nodes.iter().enumerate() {
        if k != n - 1 && k % stride != 0 {
            continue;
        }
        if t <= 0.0 {
            continue;
        }
        let mut acc = Dvec::zeros(p.m);
        // panels: solution nodes up to t, split at each alpha_i(t)
        let mut cuts: Vec<f64> = sol.nodes.iter().copied().filter(|&s| s < t).collect();
        cuts.push(t);
        for i in 1..p.n {
            let ai = p.alpha(i, t)?;
            if ai > 0.0 && ai < t {
                cuts.push(ai);
            }
        }
        if cuts[0] > 0.0 {
            cuts.push(0.0);
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() <= f64::EPSILON * t.max(1.0));
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi - lo <= 0.0 {
                continue;
            }
            let RegionIndex(i) = p.locate(t, 0.5 * (lo + hi))?;
            let klo = p.piece_eval(i, t, lo)? * sol.eval(lo);
            let khi = p.piece_eval(i, t, hi)? * sol.eval(hi);
            acc += (klo + khi) * (0.5 * (hi - lo));
        }
        acc -= p.f_eval(t)?;
        worst = worst.max(acc.amax());
    }
    Ok(worst)
}
