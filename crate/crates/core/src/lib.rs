//! Linear Volterra integral equations of the first kind with piecewise
//! kernels, in finite dimension.
//!
//! The equation under study is
//!
//! ```text
//! ∫₀ᵗ K(t,s) x(s) ds = f(t),   0 ≤ t ≤ T,   f(0) = 0,
//! ```
//!
//! where the kernel `K` is given by different smooth m×m matrix formulas
//! `K_1 … K_n` on the regions of the triangle `0 < s < t < T` separated by
//! curves `s = α_i(t)` through the origin. Differentiating in `t` turns the
//! problem into a functional-integral equation of the second kind whose
//! "delayed" arguments `α_i(t)` make the solution set nontrivial.
//!
//! The crate provides
//!
//! - [`expr`]: a small expression language used to enter curves, kernel
//!   entries and right-hand sides as text;
//! - [`model`]: the problem container, region geometry and hypothesis checks;
//! - [`conditions`]: the contraction function `D(t)`, solvability condition
//!   checks and step-size/interval planning;
//! - [`stepper`]: the step method combined with successive approximations,
//!   producing grid solutions on `[0,T]` when the problem is uniquely
//!   solvable;
//! - [`charop`]: the characteristic matrix family `B(j)`, classification of
//!   its singular Fredholm points and generalized Jordan chains;
//! - [`asympt`]: log-power expansions `x̂(t) = Σ x_j(ln t) tʲ` near `t = 0`
//!   with symbolic free parameters;
//! - [`refine`]: the correction `x(t) = x̂(t) + t^{N*} u(t)` computed by
//!   weighted-norm contraction iteration, and full parametric solutions.

pub mod asympt;
pub mod charop;
pub mod conditions;
pub mod expr;
pub mod model;
pub mod refine;
pub mod stepper;

pub(crate) mod linalg;
pub(crate) mod quad;

/// Dense dynamic matrix used throughout.
pub type Dmat = nalgebra::DMatrix<f64>;
/// Dense dynamic column vector used throughout.
pub type Dvec = nalgebra::DVector<f64>;
