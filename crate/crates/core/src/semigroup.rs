//! Eigen-elements of the mean semigroup and deterministic moment oracles.
//!
//! The mean semigroup `M_t f(x) = E_x[Z_t(f)]` is generated by
//!
//! ```text
//! A f(x) = sum_c r_c(x) ( m_c(x) (P_c f)(x) - f(x) )
//! ```
//!
//! where `m_c` is the mean offspring number of channel `c` and `P_c` the
//! placement of the children (identity, a type kernel, or the uniform
//! average for immigration, in which case the parent also survives and
//! the `-f(x)` term is absent).
//!
//! The second moment `u_t = E_x[Z_t(f)^2]` solves `u' = A u + S(M_t f)`
//! with the pair source
//!
//! ```text
//! S(v)(x) = sum_c r_c(x) ( F_c(x) (P_c v)(x)^2 + 2 s_c m_c(x) v(x) (P_c v)(x) )
//! ```
//!
//! where `F_c = E[k(k-1)]` and `s_c = 1` when the parent survives.
//!
//! On `[0, 1]` functions are represented on a Gauss–Legendre grid
//! (Nyström discretization) plus optional probe points that follow the
//! same dynamics but carry no quadrature weight.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::expr::Expr;
use crate::model::{Family, HouseOfCardsParams, Model, ModelError, Placement, TraitSpace, HOC_INTEGRAL_CUTOFF};
use crate::ode::{self, OdeError, OdeOptions};
use crate::quadrature::{gauss_legendre_on, UnitIntegrator};
use crate::simulator::TestFunction;

/// Default number of Gauss–Legendre nodes on `[0, 1]`.
pub const DEFAULT_NODES: usize = 256;
/// Relative tolerance for the critical regime `2 rho = lambda`.
pub const CRITICAL_TOL: f64 = 1e-6;
/// Factor applied to `lambda` when the raw gap is at least `lambda`.
pub const RHO_CAP_FACTOR: f64 = 1.0 - 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemigroupError {
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("operation needs a {0} model")]
    WrongFamily(&'static str),
    #[error("mean matrix is reducible: type {0} cannot reach every type")]
    Reducible(usize),
    #[error("dominant eigenvalue is not simple and real: another eigenvalue {re}+{im}i has real part close to lambda={lambda}")]
    DominantNotSimple { lambda: f64, re: f64, im: f64 },
    #[error("no eigenvalue in the bracket: integral at the lower end is {integral_at_lower}, must exceed 1")]
    NoRoot { integral_at_lower: f64 },
    #[error("process is not supercritical: lambda = {0}")]
    NotSupercritical(f64),
    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("point {0} is not represented in the discretization")]
    UnknownPoint(f64),
    #[error("linear system is singular")]
    Singular,
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Right and left eigenvectors of the mean semigroup.
#[derive(Debug, Clone, PartialEq)]
pub enum Eigenvectors {
    /// `h` and `gamma` indexed by type.
    Finite { h: Vec<f64>, gamma: Vec<f64> },
    /// `h(x) = c_h / (lambda + alpha(x))` and `gamma(dx) = c_gamma dx / (lambda + alpha(x))`.
    HouseOfCards { alpha: Expr, c_h: f64, c_gamma: f64 },
}

/// Residuals of `||h||_V = 1` and `gamma(h) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Normalization {
    pub h_norm_residual: f64,
    pub gamma_h_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenTriplet {
    pub lambda: f64,
    /// Stored convergence rate, at most `lambda`.
    pub rho: f64,
    /// `lambda` minus the largest real part of the rest of the spectrum.
    pub raw_gap: f64,
    pub vectors: Eigenvectors,
    pub normalization: Normalization,
}

/// Serializable snapshot of a triplet with `h` and `gamma` sampled on nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripletRecord {
    pub lambda: f64,
    pub rho: f64,
    pub raw_gap: f64,
    pub h_norm_residual: f64,
    pub gamma_h_residual: f64,
    /// Types, or Gauss–Legendre nodes on `[0, 1]`.
    pub nodes: Vec<f64>,
    pub h: Vec<f64>,
    /// Weights on types, or the density of `gamma` at the nodes.
    pub gamma: Vec<f64>,
}

fn stored_rho(lambda: f64, raw_gap: f64) -> f64 {
    if raw_gap >= lambda {
        lambda * RHO_CAP_FACTOR
    } else {
        raw_gap
    }
}

impl EigenTriplet {
    pub fn h(&self, x: f64) -> f64 {
        match &self.vectors {
            Eigenvectors::Finite { h, .. } => h[x as usize],
            Eigenvectors::HouseOfCards { alpha, c_h, .. } => c_h / (self.lambda + alpha.eval(x)),
        }
    }

    /// Mass of `gamma` at a type, or its density at a point of `[0, 1]`.
    pub fn gamma_density(&self, x: f64) -> f64 {
        match &self.vectors {
            Eigenvectors::Finite { gamma, .. } => gamma[x as usize],
            Eigenvectors::HouseOfCards { alpha, c_gamma, .. } => c_gamma / (self.lambda + alpha.eval(x)),
        }
    }

    /// `gamma(f)`.
    pub fn gamma_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        match &self.vectors {
            Eigenvectors::Finite { gamma, .. } => gamma.iter().enumerate().map(|(i, g)| g * f(i as f64)).sum(),
            Eigenvectors::HouseOfCards { alpha, c_gamma, .. } => {
                let lambda = self.lambda;
                c_gamma * UnitIntegrator::default().integrate(|x| f(x) / (lambda + alpha.eval(x))).value
            }
        }
    }

    pub fn is_house_of_cards(&self) -> bool {
        matches!(self.vectors, Eigenvectors::HouseOfCards { .. })
    }

    /// `h` as a test function named `"h"`.
    pub fn h_function(&self) -> TestFunction {
        let t = self.clone();
        TestFunction::new("h", move |x| t.h(x))
    }

    /// `f - gamma(f) h`, named `hat(<name>)`.
    pub fn hat(&self, f: &TestFunction) -> TestFunction {
        let g = self.gamma_of(|x| f.eval(x));
        let t = self.clone();
        let f = f.clone();
        TestFunction::new(format!("hat({})", f.name), move |x| f.eval(x) - g * t.h(x))
    }

    pub fn record(&self) -> TripletRecord {
        let (nodes, h, gamma) = match &self.vectors {
            Eigenvectors::Finite { h, gamma } => ((0..h.len()).map(|i| i as f64).collect(), h.clone(), gamma.clone()),
            Eigenvectors::HouseOfCards { .. } => {
                let nodes = gauss_legendre_on(DEFAULT_NODES, 0.0, 1.0).nodes;
                let h = nodes.iter().map(|&x| self.h(x)).collect();
                let g = nodes.iter().map(|&x| self.gamma_density(x)).collect();
                (nodes, h, g)
            }
        };
        TripletRecord {
            lambda: self.lambda,
            rho: self.rho,
            raw_gap: self.raw_gap,
            h_norm_residual: self.normalization.h_norm_residual,
            gamma_h_residual: self.normalization.gamma_h_residual,
            nodes,
            h,
            gamma,
        }
    }
}

/// Eigen-triplet of the house-of-cards semigroup with `V = 1`.
pub fn solve_eigentriplet_hoc(params: &HouseOfCardsParams, tol: f64) -> Result<EigenTriplet, SemigroupError> {
    solve_hoc(params, &Expr::constant(1.0), tol)
}

fn solve_hoc(params: &HouseOfCardsParams, weight: &Expr, tol: f64) -> Result<EigenTriplet, SemigroupError> {
    if !(tol > 0.0) {
        return Err(SemigroupError::BadTolerance(tol));
    }
    params.check()?;
    let a0 = params.alpha(0.0);
    let integ = UnitIntegrator::default();
    let alpha = &params.alpha;
    let phi = |lambda: f64| integ.integrate(|x| 1.0 / (lambda + alpha.eval(x))).value;

    let mut lo = -a0 + 1e-12;
    let at_lower = phi(lo);
    if !(at_lower > 1.0) {
        return Err(SemigroupError::NoRoot { integral_at_lower: at_lower });
    }
    let mut hi = lo.abs().max(1.0) * 2.0;
    while phi(hi) >= 1.0 {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > tol * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    if lambda <= 0.0 {
        return Err(SemigroupError::NotSupercritical(lambda));
    }

    let grid = TraitSpace::UnitInterval.validation_points();
    // sup_x h(x)/V(x) = 1 fixes c_h.
    let c_h = grid
        .iter()
        .map(|&x| (lambda + alpha.eval(x)) * weight.eval(x))
        .fold(f64::INFINITY, f64::min);
    let norm2 = integ.integrate(|x| (lambda + alpha.eval(x)).powi(-2)).value;
    let c_gamma = 1.0 / (c_h * norm2);
    let raw_gap = lambda + a0;
    let mut triplet = EigenTriplet {
        lambda,
        rho: stored_rho(lambda, raw_gap),
        raw_gap,
        vectors: Eigenvectors::HouseOfCards { alpha: alpha.clone(), c_h, c_gamma },
        normalization: Normalization { h_norm_residual: 0.0, gamma_h_residual: 0.0 },
    };
    let sup = grid.iter().map(|&x| triplet.h(x) / weight.eval(x)).fold(0.0, f64::max);
    let gh = triplet.gamma_of(|x| triplet.h(x));
    triplet.normalization = Normalization { h_norm_residual: (sup - 1.0).abs(), gamma_h_residual: (gh - 1.0).abs() };
    Ok(triplet)
}

/// Eigen-triplet of a finite-type model from its mean matrix.
pub fn solve_eigentriplet_finite(model: &Model) -> Result<EigenTriplet, SemigroupError> {
    let a = model.mean_matrix().ok_or(SemigroupError::WrongFamily("finite-type"))?;
    let d = a.len();
    check_irreducible(&a)?;
    let weight: Vec<f64> = (0..d).map(|i| model.weight(i as f64)).collect();

    let at = transpose(&a);
    let right = perron_vector(&a)?;
    let left = perron_vector(&at)?;
    let av = mat_vec(&a, &right);
    let lambda = dot(&left, &av) / dot(&left, &right);

    let raw_gap = if d == 1 {
        f64::INFINITY
    } else {
        let m = DMatrix::from_fn(d, d, |i, j| a[i][j]);
        let eig = m.complex_eigenvalues();
        let mut others: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
        let closest = others
            .iter()
            .enumerate()
            .min_by(|x, y| {
                let dx = (x.1 .0 - lambda).hypot(x.1 .1);
                let dy = (y.1 .0 - lambda).hypot(y.1 .1);
                dx.total_cmp(&dy)
            })
            .map(|(i, _)| i)
            .unwrap();
        others.swap_remove(closest);
        let scale = lambda.abs().max(1.0);
        if let Some(&(re, im)) = others.iter().find(|(re, _)| *re >= lambda - 1e-9 * scale) {
            return Err(SemigroupError::DominantNotSimple { lambda, re, im });
        }
        lambda - others.iter().map(|z| z.0).fold(f64::NEG_INFINITY, f64::max)
    };
    if lambda <= 0.0 {
        return Err(SemigroupError::NotSupercritical(lambda));
    }

    let norm = right.iter().zip(&weight).map(|(h, v)| h / v).fold(0.0, f64::max);
    let h: Vec<f64> = right.iter().map(|x| x / norm).collect();
    let gh = dot(&left, &h);
    let gamma: Vec<f64> = left.iter().map(|x| x / gh).collect();
    let sup = h.iter().zip(&weight).map(|(h, v)| h / v).fold(0.0, f64::max);
    let normalization = Normalization { h_norm_residual: (sup - 1.0).abs(), gamma_h_residual: (dot(&gamma, &h) - 1.0).abs() };
    Ok(EigenTriplet { lambda, rho: stored_rho(lambda, raw_gap), raw_gap, vectors: Eigenvectors::Finite { h, gamma }, normalization })
}

/// Eigen-triplet for any built-in model.
pub fn solve_eigentriplet(model: &Model) -> Result<EigenTriplet, SemigroupError> {
    match model.family() {
        Family::HouseOfCards(params) => solve_hoc(params, model.weight_expr(), 1e-14),
        Family::Yule { .. } | Family::FiniteType => solve_eigentriplet_finite(model),
    }
}

fn check_irreducible(a: &[Vec<f64>]) -> Result<(), SemigroupError> {
    let d = a.len();
    for graph in [a.to_vec(), transpose(a)] {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..d {
                if i != j && graph[i][j] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(SemigroupError::Reducible(0));
        }
    }
    Ok(())
}

/// Perron vector of an irreducible Metzler matrix by shifted power iteration.
fn perron_vector(a: &[Vec<f64>]) -> Result<Vec<f64>, SemigroupError> {
    const MAX_ITER: usize = 1_000_000;
    let d = a.len();
    // The extra unit makes the shifted matrix primitive.
    let shift = 1.0 + (0..d).map(|i| -a[i][i]).fold(0.0, f64::max);
    let mut v = vec![1.0 / d as f64; d];
    let mut next = vec![0.0; d];
    for _ in 0..MAX_ITER {
        for i in 0..d {
            next[i] = shift * v[i] + a[i].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        }
        let s: f64 = next.iter().sum();
        let mut diff = 0.0f64;
        for i in 0..d {
            next[i] /= s;
            diff = diff.max((next[i] - v[i]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if diff < 1e-15 {
            return Ok(v);
        }
    }
    Err(SemigroupError::NoConvergence(MAX_ITER))
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = a.len();
    (0..d).map(|i| (0..d).map(|j| a[j][i]).collect()).collect()
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Small,
    Critical,
    Large,
}

/// Integral conditions of the house-of-cards regime corollaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HocRegimeIntegrals {
    pub alpha_at_zero: f64,
    /// `int_0^1 dx / alpha(x)`; `None` when `alpha` changes sign on `(0, 1]`.
    pub inverse_alpha: Option<f64>,
    /// `int_0^1 dx / (alpha(x) - 2 alpha(0))`; `None` when the integrand changes sign.
    pub inverse_shifted_alpha: Option<f64>,
    /// Regime implied by comparing `lambda` with `-2 alpha(0)`.
    pub predicted: RegimeKind,
    pub consistent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regime {
    pub kind: RegimeKind,
    pub tol_rel: f64,
    pub lambda: f64,
    pub rho: f64,
    pub hoc: Option<HocRegimeIntegrals>,
}

pub fn classify_regime(triplet: &EigenTriplet, tol_rel: f64) -> Regime {
    let (lambda, rho) = (triplet.lambda, triplet.rho);
    let kind = kind_of(2.0 * rho, lambda, tol_rel);
    let hoc = match &triplet.vectors {
        Eigenvectors::HouseOfCards { alpha, .. } => {
            let a0 = alpha.eval(0.0);
            let inverse_alpha = signed_integral(|x| alpha.eval(x));
            let inverse_shifted_alpha = signed_integral(|x| alpha.eval(x) - 2.0 * a0);
            // lambda > -2 alpha(0) is equivalent to the shifted integral exceeding 1.
            let predicted = if a0 >= 0.0 {
                RegimeKind::Small
            } else {
                match inverse_shifted_alpha {
                    Some(v) => kind_of(v, 1.0, tol_rel),
                    None => kind_of(lambda, -2.0 * a0, tol_rel),
                }
            };
            Some(HocRegimeIntegrals { alpha_at_zero: a0, inverse_alpha, inverse_shifted_alpha, predicted, consistent: predicted == kind })
        }
        Eigenvectors::Finite { .. } => None,
    };
    Regime { kind, tol_rel, lambda, rho, hoc }
}

fn kind_of(value: f64, reference: f64, tol_rel: f64) -> RegimeKind {
    let scale = reference.abs();
    if (value - reference).abs() <= scale * tol_rel {
        RegimeKind::Critical
    } else if value > reference {
        RegimeKind::Small
    } else {
        RegimeKind::Large
    }
}

/// `int_0^1 dx / g(x)` when `g` keeps one sign on `(0, 1]`, with the
/// improper end at 0 cut off as in the model's admissibility check.
fn signed_integral(g: impl Fn(f64) -> f64) -> Option<f64> {
    let grid = TraitSpace::UnitInterval.validation_points();
    let positive = grid[1..].iter().all(|&x| g(x) > 0.0);
    let negative = grid[1..].iter().all(|&x| g(x) < 0.0);
    if !(positive || negative) {
        return None;
    }
    let integ = if g(0.0) == 0.0 { UnitIntegrator::with_cutoff(HOC_INTEGRAL_CUTOFF) } else { UnitIntegrator::default() };
    Some(integ.integrate(|x| 1.0 / g(x)).value)
}

#[derive(Debug, Clone)]
enum Coupling {
    Local,
    Kernel(Vec<Vec<f64>>),
    Immigration,
}

#[derive(Debug, Clone)]
struct ChannelTable {
    rate: Vec<f64>,
    m1: Vec<f64>,
    f2: Vec<f64>,
    coupling: Coupling,
}

/// First and second moments at one output time, on the solver's points.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Limits of the rescaled fluctuation second moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceLimits {
    pub gamma_f: f64,
    /// `gamma(psi_inf)`, the variance of `W` under `gamma`.
    pub gamma_psi: f64,
    /// `lim e^{-lambda t} M2_t[f_hat] / h`, small-regime limit.
    pub eta_small: f64,
    /// `eta_small + gamma(f)^2 gamma(psi_inf)`.
    pub sigma2_small: f64,
    /// `e^{-lambda s} gamma(S(M_s f_hat))` at the last horizon, the
    /// growth rate of the critical-regime second moment.
    pub eta_critical: f64,
    pub horizon: f64,
    pub converged: bool,
}

/// Discretized mean generator and pair source of a model.
#[derive(Debug, Clone)]
pub struct MomentSolver {
    points: Vec<f64>,
    weights: Vec<f64>,
    channels: Vec<ChannelTable>,
    opts: OdeOptions,
}

impl MomentSolver {
    /// Solver with the default grid and the given probe points.
    pub fn new(model: &Model, probes: &[f64]) -> Self {
        Self::with_nodes(model, DEFAULT_NODES, probes)
    }

    /// On `[0, 1]`: `nodes` Gauss–Legendre points followed by `probes`.
    /// On a finite space the points are the types and `nodes`/`probes` are ignored.
    pub fn with_nodes(model: &Model, nodes: usize, probes: &[f64]) -> Self {
        let (points, weights) = match model.space() {
            TraitSpace::Finite { types } => ((0..types).map(|i| i as f64).collect(), vec![0.0; types]),
            TraitSpace::UnitInterval => {
                let rule = gauss_legendre_on(nodes, 0.0, 1.0);
                let mut p = rule.nodes;
                let mut w = rule.weights;
                p.extend_from_slice(probes);
                w.resize(p.len(), 0.0);
                (p, w)
            }
        };
        let channels = model
            .channels()
            .iter()
            .map(|ch| {
                let mut rate = Vec::with_capacity(points.len());
                let mut m1 = Vec::with_capacity(points.len());
                let mut f2 = Vec::with_capacity(points.len());
                for &x in &points {
                    let (a, b) = ch.law.factorial_moments(x);
                    rate.push(ch.rate.at(x));
                    m1.push(a);
                    f2.push(b);
                }
                let coupling = match &ch.placement {
                    Placement::Local => Coupling::Local,
                    Placement::Kernel(k) => Coupling::Kernel(k.clone()),
                    Placement::UniformImmigration => Coupling::Immigration,
                };
                ChannelTable { rate, m1, f2, coupling }
            })
            .collect();
        Self { points, weights, channels, opts: OdeOptions::default() }
    }

    pub fn with_options(mut self, opts: OdeOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of a point (type or probe) in the discretization.
    pub fn index_of(&self, x: f64) -> Result<usize, SemigroupError> {
        self.points.iter().position(|&p| p == x).ok_or(SemigroupError::UnknownPoint(x))
    }

    /// Values of `f` on the points.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.points.iter().map(|&x| f(x)).collect()
    }

    /// Quadrature of `u` over `[0, 1]`.
    pub fn integral(&self, u: &[f64]) -> f64 {
        self.weights.iter().zip(u).map(|(w, v)| w * v).sum()
    }

    fn placed(coupling: &Coupling, u: &[f64], integral: f64, i: usize) -> f64 {
        match coupling {
            Coupling::Local => u[i],
            Coupling::Kernel(k) => dot(&k[i], u),
            Coupling::Immigration => integral,
        }
    }

    /// `out = A u`.
    pub fn apply_generator(&self, u: &[f64], out: &mut [f64]) {
        let integral = self.integral(u);
        out.iter_mut().for_each(|o| *o = 0.0);
        for ch in &self.channels {
            let survives = matches!(ch.coupling, Coupling::Immigration);
            for (i, o) in out.iter_mut().enumerate() {
                let r = ch.rate[i];
                if r == 0.0 {
                    continue;
                }
                let p = Self::placed(&ch.coupling, u, integral, i);
                *o += r * (ch.m1[i] * p - if survives { 0.0 } else { u[i] });
            }
        }
    }

    /// `out = S(u)`, the pair source of the second-moment equation.
    pub fn source(&self, u: &[f64], out: &mut [f64]) {
        let integral = self.integral(u);
        out.iter_mut().for_each(|o| *o = 0.0);
        for ch in &self.channels {
            let survives = matches!(ch.coupling, Coupling::Immigration);
            for (i, o) in out.iter_mut().enumerate() {
                let r = ch.rate[i];
                if r == 0.0 {
                    continue;
                }
                let p = Self::placed(&ch.coupling, u, integral, i);
                let mut s = ch.f2[i] * p * p;
                if survives {
                    s += 2.0 * ch.m1[i] * u[i] * p;
                }
                *o += r * s;
            }
        }
    }

    /// Dense matrix of the discretized generator.
    pub fn generator_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply_generator(&e, &mut col);
            e[j] = 0.0;
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        m
    }

    fn check_times(times: &[f64]) -> Result<(), SemigroupError> {
        if let Some(&t) = times.iter().find(|t| !(**t >= 0.0)) {
            return Err(SemigroupError::NegativeTime(t));
        }
        Ok(())
    }

    /// `M_t f` at each of `times` (nondecreasing), starting from `f` on the points.
    pub fn mean(&self, f: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>, SemigroupError> {
        Self::check_times(times)?;
        Ok(ode::integrate(|y, dy| self.apply_generator(y, dy), f, times, self.opts)?)
    }

    /// `M_t f` and `E[Z_t(f)^2]` at each of `times`.
    pub fn second_moment(&self, f: &[f64], times: &[f64]) -> Result<Vec<Moments>, SemigroupError> {
        Self::check_times(times)?;
        let n = self.len();
        let mut y0 = f.to_vec();
        y0.extend(f.iter().map(|v| v * v));
        let mut src = vec![0.0; n];
        let out = ode::integrate(
            |y, dy| {
                let (u1, u2) = y.split_at(n);
                let (d1, d2) = dy.split_at_mut(n);
                self.apply_generator(u1, d1);
                self.apply_generator(u2, d2);
                self.source(u1, &mut src);
                for (d, s) in d2.iter_mut().zip(&src) {
                    *d += s;
                }
            },
            &y0,
            times,
            self.opts,
        )?;
        Ok(out.into_iter().map(|y| Moments { first: y[..n].to_vec(), second: y[n..].to_vec() }).collect())
    }

    /// `E_x[W^2] = (2 lambda - A)^{-1} S(h)` on the points.
    pub fn w_second_moment(&self, triplet: &EigenTriplet) -> Result<Vec<f64>, SemigroupError> {
        let n = self.len();
        let h = self.sample(|x| triplet.h(x));
        let mut s = vec![0.0; n];
        self.source(&h, &mut s);
        let m = DMatrix::identity(n, n) * (2.0 * triplet.lambda) - self.generator_matrix();
        let sol = m.lu().solve(&DVector::from_vec(s)).ok_or(SemigroupError::Singular)?;
        Ok(sol.iter().copied().collect())
    }

    /// `psi_inf(x) = Var_x(W)` on the points.
    pub fn psi_infinity(&self, triplet: &EigenTriplet) -> Result<Vec<f64>, SemigroupError> {
        let v = self.w_second_moment(triplet)?;
        Ok(v.iter().zip(&self.points).map(|(v, &x)| v - triplet.h(x).powi(2)).collect())
    }

    /// `gamma(u)` for a function given on the points.
    pub fn gamma_on_points(&self, triplet: &EigenTriplet, u: &[f64]) -> f64 {
        match &triplet.vectors {
            Eigenvectors::Finite { gamma, .. } => dot(gamma, u),
            Eigenvectors::HouseOfCards { .. } => self
                .weights
                .iter()
                .zip(&self.points)
                .zip(u)
                .map(|((w, &x), v)| w * triplet.gamma_density(x) * v)
                .sum(),
        }
    }

    /// Fluctuation second moment `F2_t[f] = M2_t[f_hat] + gamma(f)^2 M_t psi_inf`.
    pub fn fluctuation_second_moment(
        &self,
        triplet: &EigenTriplet,
        f: &TestFunction,
        times: &[f64],
    ) -> Result<Vec<Vec<f64>>, SemigroupError> {
        let g = triplet.gamma_of(|x| f.eval(x));
        let fhat = self.sample(|x| f.eval(x) - g * triplet.h(x));
        let m2 = self.second_moment(&fhat, times)?;
        let psi = self.psi_infinity(triplet)?;
        let mpsi = self.mean(&psi, times)?;
        Ok(m2
            .into_iter()
            .zip(mpsi)
            .map(|(m, p)| m.second.iter().zip(&p).map(|(a, b)| a + g * g * b).collect())
            .collect())
    }

    /// Limits of `e^{-lambda t} F2_t[f] / h` from
    /// `gamma(f_hat^2) + int_0^inf e^{-lambda s} gamma(S(M_s f_hat)) ds`.
    ///
    /// The integral is extended in unit chunks until it settles or
    /// `lambda * s` reaches 30, beyond which rounding along `h` would
    /// be amplified.
    pub fn variance_limits(&self, triplet: &EigenTriplet, f: &TestFunction) -> Result<VarianceLimits, SemigroupError> {
        let n = self.len();
        let lambda = triplet.lambda;
        let g = triplet.gamma_of(|x| f.eval(x));
        let fhat = self.sample(|x| f.eval(x) - g * triplet.h(x));
        let psi = self.psi_infinity(triplet)?;
        let gamma_psi = self.gamma_on_points(triplet, &psi);
        let sq: Vec<f64> = fhat.iter().map(|v| v * v).collect();
        let base = self.gamma_on_points(triplet, &sq);

        let gamma_weights: Vec<f64> = match &triplet.vectors {
            Eigenvectors::Finite { gamma, .. } => gamma.clone(),
            Eigenvectors::HouseOfCards { .. } => {
                self.weights.iter().zip(&self.points).map(|(w, &x)| w * triplet.gamma_density(x)).collect()
            }
        };
        // State: [u (n), J, s].
        let mut src = vec![0.0; n];
        let rhs = |y: &[f64], dy: &mut [f64]| {
            let (u, rest) = y.split_at(n);
            let (du, drest) = dy.split_at_mut(n);
            self.apply_generator(u, du);
            self.source(u, &mut src);
            drest[0] = (-lambda * rest[1]).exp() * dot(&gamma_weights, &src);
            drest[1] = 1.0;
        };
        let mut rhs = rhs;
        let mut y = fhat.clone();
        y.extend([0.0, 0.0]);
        let s_max = (30.0 / lambda).max(1.0).ceil();
        let mut s = 0.0;
        let mut converged = false;
        let mut previous = 0.0;
        while s < s_max {
            let step = 1.0f64.min(s_max - s);
            let out = ode::integrate(&mut rhs, &y, &[step], self.opts)?;
            y = out.into_iter().next().unwrap();
            y[n + 1] = s + step;
            s += step;
            let j = y[n];
            if s >= 4.0 && (j - previous).abs() <= 1e-10 * (base + j).abs().max(1e-14) {
                converged = true;
                break;
            }
            previous = j;
        }
        let mut dy = vec![0.0; n + 2];
        rhs(&y, &mut dy);
        let eta_small = base + y[n];
        Ok(VarianceLimits {
            gamma_f: g,
            gamma_psi,
            eta_small,
            sigma2_small: eta_small + g * g * gamma_psi,
            eta_critical: dy[n],
            horizon: s,
            converged,
        })
    }
}

/// Values of a function on a solver's points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn at(&self, x: f64) -> Option<f64> {
        self.points.iter().position(|&p| p == x).map(|i| self.values[i])
    }
}

/// `M_t f` on the model's grid plus `probes`.
pub fn mean_semigroup_apply(model: &Model, t: f64, f: &TestFunction, probes: &[f64]) -> Result<GridFunction, SemigroupError> {
    if !(t >= 0.0) {
        return Err(SemigroupError::NegativeTime(t));
    }
    let solver = MomentSolver::new(model, probes);
    let values = solver.mean(&solver.sample(|x| f.eval(x)), &[t])?.remove(0);
    Ok(GridFunction { points: solver.points, values })
}

/// `E_x[Z_t(f)^2]` on the model's grid plus `probes`.
pub fn second_moment_ode(model: &Model, t: f64, f: &TestFunction, probes: &[f64]) -> Result<GridFunction, SemigroupError> {
    if !(t >= 0.0) {
        return Err(SemigroupError::NegativeTime(t));
    }
    let solver = MomentSolver::new(model, probes);
    let values = solver.second_moment(&solver.sample(|x| f.eval(x)), &[t])?.remove(0).second;
    Ok(GridFunction { points: solver.points, values })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub function: String,
    pub x: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub function: String,
    /// Fitted exponential decay rate of the largest residual; `None` when
    /// the residual stays at rounding level.
    pub rate: Option<f64>,
    /// Smallest `a2` with residual `<= a2 ||f||_V e^{-rho t}` on the grid.
    pub a2: f64,
    pub max_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub rho: f64,
    pub rows: Vec<DecayRow>,
    pub fits: Vec<DecayFit>,
}

/// Residual floor below which decay is treated as exact.
const DECAY_FLOOR: f64 = 1e-10;

/// Checks `|e^{-lambda t} M_t f(x) - gamma(f) h(x)| <= a2 e^{-rho t}` on a grid.
pub fn verify_gap_decay(
    model: &Model,
    triplet: &EigenTriplet,
    t_grid: &[f64],
    f_set: &[TestFunction],
) -> Result<DecayReport, SemigroupError> {
    let solver = match model.space() {
        TraitSpace::Finite { .. } => MomentSolver::new(model, &[]),
        TraitSpace::UnitInterval => {
            let probes: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
            MomentSolver::new(model, &probes)
        }
    };
    // Residuals are reported on the types, or on the probe points.
    let shown: Vec<usize> = match model.space() {
        TraitSpace::Finite { types } => (0..types).collect(),
        TraitSpace::UnitInterval => (DEFAULT_NODES..solver.len()).collect(),
    };
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for f in f_set {
        let g = triplet.gamma_of(|x| f.eval(x));
        let values = solver.mean(&solver.sample(|x| f.eval(x)), t_grid)?;
        let norm_v = model
            .space()
            .validation_points()
            .iter()
            .map(|&x| f.eval(x).abs() / model.weight(x))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut fit_t = Vec::new();
        let mut fit_log = Vec::new();
        let mut a2 = 0.0f64;
        let mut max_residual = 0.0f64;
        for (&t, u) in t_grid.iter().zip(&values) {
            let scale = (-triplet.lambda * t).exp();
            let mut worst = 0.0f64;
            for &i in &shown {
                let x = solver.points()[i];
                let residual = (scale * u[i] - g * triplet.h(x)).abs();
                worst = worst.max(residual);
                rows.push(DecayRow { t, function: f.name.clone(), x, residual });
            }
            max_residual = max_residual.max(worst);
            a2 = a2.max(worst * (triplet.rho * t).exp() / norm_v);
            if worst > DECAY_FLOOR * norm_v {
                fit_t.push(t);
                fit_log.push(worst.ln());
            }
        }
        let rate = if fit_t.len() >= 2 { Some(-slope(&fit_t, &fit_log)) } else { None };
        let passed = rate.is_none_or(|r| r >= 0.9 * triplet.rho);
        fits.push(DecayFit { function: f.name.clone(), rate, a2, max_residual, passed });
    }
    Ok(DecayReport { rho: triplet.rho, rows, fits })
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_finite_type_channels, make_house_of_cards, make_yule, FiniteChannel};

    const A: f64 = 0.581_976_706_869_326_4; // 1/(e-1)

    fn two_type(mutation: f64) -> Model {
        make_finite_type_channels(vec![
            FiniteChannel { name: "fission".into(), rates: vec![1.0, 2.0], offspring: vec![vec![0.0, 0.0, 1.0]], kernel: None },
            FiniteChannel {
                name: "mutation".into(),
                rates: vec![mutation, mutation],
                offspring: vec![vec![0.0, 1.0]],
                kernel: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            },
        ])
        .unwrap()
    }

    fn hoc(alpha: &str) -> HouseOfCardsParams {
        HouseOfCardsParams::new(alpha).unwrap()
    }

    #[test]
    fn one_over_e_minus_one() {
        assert!((A - 1.0 / (std::f64::consts::E - 1.0)).abs() < 1e-16);
    }

    #[test]
    fn hoc_constant_alpha() {
        for c in [0.3, -0.5, 0.0] {
            let t = solve_eigentriplet_hoc(&hoc(&format!("{c}")), 1e-14).unwrap();
            assert!((t.lambda - (1.0 - c)).abs() < 1e-12, "c={c} lambda={}", t.lambda);
            assert!((t.h(0.3) - 1.0).abs() < 1e-12);
            assert!((t.gamma_density(0.7) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn hoc_alpha_x() {
        let t = solve_eigentriplet_hoc(&hoc("x"), 1e-14).unwrap();
        assert!((t.lambda - A).abs() < 1e-12);
        // h(x) = lambda/(lambda+x), gamma(dx) = (lambda+1)/(lambda+x) dx.
        for x in [0.0, 0.25, 1.0] {
            assert!((t.h(x) - A / (A + x)).abs() < 1e-12);
            assert!((t.gamma_density(x) - (A + 1.0) / (A + x)).abs() < 1e-9);
        }
        assert!(t.normalization.h_norm_residual < 1e-10);
        assert!(t.normalization.gamma_h_residual < 1e-10);
        assert_eq!(t.raw_gap, t.lambda);
        assert!(t.rho < t.lambda);
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Small);
    }

    #[test]
    fn hoc_critical_construction() {
        let t = solve_eigentriplet_hoc(&hoc("x - 1/(e-1)"), 1e-14).unwrap();
        assert!((t.lambda - 2.0 * A).abs() < 1e-12);
        assert!((t.rho - A).abs() < 1e-12);
        let r = classify_regime(&t, CRITICAL_TOL);
        assert_eq!(r.kind, RegimeKind::Critical);
        let hoc = r.hoc.unwrap();
        assert!((hoc.inverse_shifted_alpha.unwrap() - 1.0).abs() < 1e-10);
        assert!(hoc.inverse_alpha.is_none());
        assert!(hoc.consistent);
    }

    #[test]
    fn hoc_rejections() {
        // alpha decreasing violates the selection condition.
        assert!(matches!(solve_eigentriplet_hoc(&hoc("-x"), 1e-12), Err(SemigroupError::Model(_))));
        // Large positive alpha: lambda would be negative.
        assert!(matches!(solve_eigentriplet_hoc(&hoc("2"), 1e-12), Err(SemigroupError::NotSupercritical(_))));
        assert!(solve_eigentriplet_hoc(&hoc("x"), 0.0).is_err());
    }

    #[test]
    fn finite_single_type() {
        let t = solve_eigentriplet_finite(&make_yule(1.5).unwrap()).unwrap();
        assert!((t.lambda - 1.5).abs() < 1e-14);
        assert_eq!(t.vectors, Eigenvectors::Finite { h: vec![1.0], gamma: vec![1.0] });
        assert!(t.raw_gap.is_infinite());
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Small);
    }

    #[test]
    fn finite_two_type_closed_form() {
        // A = [[0.9, 0.1], [0.1, 1.9]]: eigenvalues 1.4 +- sqrt(0.26).
        let t = solve_eigentriplet_finite(&two_type(0.1)).unwrap();
        let s = 0.26f64.sqrt();
        assert!((t.lambda - (1.4 + s)).abs() < 1e-10);
        assert!((t.raw_gap - 2.0 * s).abs() < 1e-10);
        assert_eq!(t.rho, t.raw_gap);
        // Right eigenvector (0.1, lambda - 0.9) up to scale, max component 1.
        let Eigenvectors::Finite { h, gamma } = &t.vectors else { panic!() };
        assert!((h[0] / h[1] - 0.1 / (t.lambda - 0.9)).abs() < 1e-12);
        assert!((h[1] - 1.0).abs() < 1e-14);
        assert!((gamma[0] * h[0] + gamma[1] * h[1] - 1.0).abs() < 1e-14);
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Small);
    }

    #[test]
    fn finite_permutation_invariance() {
        let a = make_finite_type(vec![1.0, 0.5, 2.0], vec![vec![0.1, 0.2, 0.7]], vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]]).unwrap();
        // Relabel types 0 -> 2, 1 -> 0, 2 -> 1.
        let b = make_finite_type(vec![0.5, 2.0, 1.0], vec![vec![0.1, 0.2, 0.7]], vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.6, 0.2], vec![0.3, 0.2, 0.5]]).unwrap();
        let ta = solve_eigentriplet_finite(&a).unwrap();
        let tb = solve_eigentriplet_finite(&b).unwrap();
        assert!((ta.lambda - tb.lambda).abs() < 1e-12);
        assert!((ta.raw_gap - tb.raw_gap).abs() < 1e-10);
        let perm = [2usize, 0, 1];
        for (i, &j) in perm.iter().enumerate() {
            assert!((ta.h(i as f64) - tb.h(j as f64)).abs() < 1e-12);
            assert!((ta.gamma_density(i as f64) - tb.gamma_density(j as f64)).abs() < 1e-12);
        }
    }

    use crate::model::make_finite_type;

    #[test]
    fn finite_rejections() {
        let reducible = make_finite_type(vec![1.0, 1.0], vec![vec![0.0, 0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(solve_eigentriplet_finite(&reducible), Err(SemigroupError::Reducible(_))));
        let subcritical = make_finite_type(vec![1.0, 1.0], vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(solve_eigentriplet_finite(&subcritical), Err(SemigroupError::NotSupercritical(_))));
        let h = make_house_of_cards(hoc("x")).unwrap();
        assert!(matches!(solve_eigentriplet_finite(&h), Err(SemigroupError::WrongFamily(_))));
    }

    #[test]
    fn regime_thresholds() {
        let mut t = solve_eigentriplet_finite(&make_yule(1.0).unwrap()).unwrap();
        t.rho = 1.0;
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Small);
        t.rho = 0.5;
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Critical);
        t.rho = 0.5 * (1.0 + 1e-7);
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Critical);
        t.rho = 0.4;
        assert_eq!(classify_regime(&t, CRITICAL_TOL).kind, RegimeKind::Large);
    }

    #[test]
    fn yule_mean_and_second_moment() {
        let m = make_yule(1.0).unwrap();
        let one = TestFunction::ones();
        assert!((mean_semigroup_apply(&m, 3.0, &one, &[]).unwrap().values[0] - 3f64.exp()).abs() < 1e-8 * 3f64.exp());
        for t in [0.0, 1.0, 4.0] {
            let v = second_moment_ode(&m, t, &one, &[]).unwrap().values[0];
            let exact = 2.0 * (2.0 * t).exp() - t.exp();
            assert!((v - exact).abs() < 1e-8 * exact, "t={t}: {v} vs {exact}");
        }
        assert!(mean_semigroup_apply(&m, -1.0, &one, &[]).is_err());
    }

    #[test]
    fn yule_w_variance_is_one() {
        let m = make_yule(1.0).unwrap();
        let t = solve_eigentriplet(&m).unwrap();
        let s = MomentSolver::new(&m, &[]);
        assert!((s.w_second_moment(&t).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((s.psi_infinity(&t).unwrap()[0] - 1.0).abs() < 1e-12);
        let lim = s.variance_limits(&t, &t.h_function()).unwrap();
        assert!((lim.sigma2_small - 1.0).abs() < 1e-10);
        assert!(lim.eta_small.abs() < 1e-12);
    }

    #[test]
    fn finite_mean_matches_matrix_exponential() {
        let m = two_type(0.1);
        let a = m.mean_matrix().unwrap();
        let s = MomentSolver::new(&m, &[]);
        let f = [0.3, -1.2];
        for t in [0.5, 2.0, 5.0] {
            let expm = (DMatrix::from_fn(2, 2, |i, j| a[i][j]) * t).exp();
            let exact = expm * DVector::from_column_slice(&f);
            let ode = s.mean(&f, &[t]).unwrap().remove(0);
            for i in 0..2 {
                assert!((ode[i] - exact[i]).abs() < 1e-8 * exact.amax());
            }
        }
    }

    #[test]
    fn hoc_mean_matches_closed_form_for_constant_alpha() {
        // alpha = c: M_t 1 = e^{(1-c)t}; M_t f for int f = 0 decays as e^{-ct}.
        let m = make_house_of_cards(hoc("0.3")).unwrap();
        let s = MomentSolver::new(&m, &[0.1, 0.9]);
        let one = s.sample(|_| 1.0);
        let cosine = s.sample(|x| (2.0 * std::f64::consts::PI * x).cos());
        let t = 2.0;
        let u = s.mean(&one, &[t]).unwrap().remove(0);
        assert!(u.iter().all(|v| (v - (0.7 * t).exp()).abs() < 1e-9));
        let u = s.mean(&cosine, &[t]).unwrap().remove(0);
        let i = s.index_of(0.9).unwrap();
        assert!((u[i] - (-0.3 * t).exp() * (2.0 * std::f64::consts::PI * 0.9).cos()).abs() < 1e-9);
    }

    #[test]
    fn semigroup_property_and_eigen_relations() {
        for m in [two_type(0.1), make_house_of_cards(hoc("x")).unwrap(), make_house_of_cards(hoc("x - 1/(e-1)")).unwrap()] {
            let t = solve_eigentriplet(&m).unwrap();
            let s = MomentSolver::new(&m, &[0.0, 0.5, 1.0]);
            let fs = [s.sample(|x| 1.0 + x * x), s.sample(|x| (3.0 * x).sin()), s.sample(|x| t.h(x))];
            for f in &fs {
                let (a, b) = (0.7, 1.3);
                let direct = s.mean(f, &[a + b]).unwrap().remove(0);
                let mid = s.mean(f, &[b]).unwrap().remove(0);
                let composed = s.mean(&mid, &[a]).unwrap().remove(0);
                let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (x, y) in direct.iter().zip(&composed) {
                    assert!((x - y).abs() < 1e-7 * scale);
                }
            }
            let h = &fs[2];
            let tt = 2.0;
            let mh = s.mean(h, &[tt]).unwrap().remove(0);
            let growth = (t.lambda * tt).exp();
            for (u, v) in mh.iter().zip(h) {
                assert!((u - growth * v).abs() < 1e-7 * growth * v.abs().max(1e-3));
            }
            // Left relation: gamma(M_t f) = e^{lambda t} gamma(f).
            let f = &fs[1];
            let mf = s.mean(f, &[tt]).unwrap().remove(0);
            let lhs = s.gamma_on_points(&t, &mf);
            let rhs = growth * s.gamma_on_points(&t, f);
            assert!((lhs - rhs).abs() < 1e-7 * growth * s.gamma_on_points(&t, &s.sample(|x| f64::abs((3.0 * x).sin()))));
        }
    }

    #[test]
    fn positivity() {
        let m = make_house_of_cards(hoc("x - 0.4")).unwrap();
        let s = MomentSolver::new(&m, &[]);
        let f = s.sample(|x| if x < 0.2 { 1.0 } else { 0.0 });
        for u in s.mean(&f, &[0.5, 2.0, 6.0]).unwrap() {
            assert!(u.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn second_moment_recursion() {
        // M2_{r+s}[f] = M_r M2_s[f] + M2_r[M_s f] - M_r[(M_s f)^2].
        let m = two_type(0.1);
        let s = MomentSolver::new(&m, &[]);
        let f = [1.0, -0.4];
        let (r, q) = (0.5, 0.5);
        let direct = s.second_moment(&f, &[r + q]).unwrap().remove(0).second;
        let at_s = s.second_moment(&f, &[q]).unwrap().remove(0);
        let a = s.mean(&at_s.second, &[r]).unwrap().remove(0);
        let b = s.second_moment(&at_s.first, &[r]).unwrap().remove(0).second;
        let sq: Vec<f64> = at_s.first.iter().map(|v| v * v).collect();
        let c = s.mean(&sq, &[r]).unwrap().remove(0);
        for i in 0..2 {
            let via = a[i] + b[i] - c[i];
            assert!((direct[i] - via).abs() < 1e-6 * direct[i].abs());
        }
    }

    #[test]
    fn moment_growth_slopes() {
        let m = two_type(0.1);
        let t = solve_eigentriplet(&m).unwrap();
        let s = MomentSolver::new(&m, &[]);
        let f = TestFunction::new("f", |x| if x == 0.0 { 1.0 } else { -0.3 });
        let fhat = t.hat(&f);
        let times: Vec<f64> = (0..=12).map(|i| 2.0 + 0.5 * i as f64).collect();
        let u = s.second_moment(&s.sample(|x| fhat.eval(x)), &times).unwrap();
        let first: Vec<f64> = u.iter().map(|m| m.first[0].abs().ln()).collect();
        let second: Vec<f64> = u.iter().map(|m| m.second[0].ln()).collect();
        let k1 = slope(&times, &first);
        let k2 = slope(&times, &second);
        assert!((k1 - (t.lambda - t.raw_gap)).abs() < 0.05 * (t.lambda - t.raw_gap), "k1={k1}");
        assert!((k2 - t.lambda).abs() < 0.1 * t.lambda, "k2={k2}");
        let one = s.second_moment(&s.sample(|_| 1.0), &times).unwrap();
        let logs: Vec<f64> = one.iter().map(|m| m.second[0].ln()).collect();
        assert!((slope(&times, &logs) - 2.0 * t.lambda).abs() < 0.05 * 2.0 * t.lambda);
    }

    #[test]
    fn variance_limit_matches_long_ode() {
        let m = two_type(1.0);
        let t = solve_eigentriplet(&m).unwrap();
        let s = MomentSolver::new(&m, &[]);
        for f in [TestFunction::new("f", |x| if x == 0.0 { 1.0 } else { -0.3 }), TestFunction::ones()] {
            let lim = s.variance_limits(&t, &f).unwrap();
            assert!(lim.converged);
            let big = 12.0;
            let f2 = s.fluctuation_second_moment(&t, &f, &[big]).unwrap().remove(0);
            for x in 0..2 {
                let v = (-t.lambda * big).exp() * f2[x] / t.h(x as f64);
                assert!((v - lim.sigma2_small).abs() < 1e-6 * lim.sigma2_small, "{v} vs {}", lim.sigma2_small);
            }
        }
    }

    #[test]
    fn gap_decay_report() {
        let m = two_type(0.1);
        let t = solve_eigentriplet(&m).unwrap();
        let grid: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let fs = [t.h_function(), TestFunction::ones(), TestFunction::new("e0", |x| if x == 0.0 { 1.0 } else { 0.0 })];
        let report = verify_gap_decay(&m, &t, &grid, &fs).unwrap();
        assert!(report.fits[0].rate.is_none() && report.fits[0].max_residual < 1e-10);
        for fit in &report.fits[1..] {
            let rate = fit.rate.unwrap();
            assert!((rate - t.raw_gap).abs() < 0.1 * t.raw_gap, "{rate}");
            assert!(fit.passed);
        }
        let y = make_yule(1.0).unwrap();
        let ty = solve_eigentriplet(&y).unwrap();
        let r = verify_gap_decay(&y, &ty, &grid, &[TestFunction::new("c", |_| 2.5)]).unwrap();
        assert!(r.fits[0].max_residual < 1e-10);

        let hm = make_house_of_cards(hoc("x")).unwrap();
        let th = solve_eigentriplet(&hm).unwrap();
        let r = verify_gap_decay(&hm, &th, &grid, &[TestFunction::ones()]).unwrap();
        assert!(r.fits[0].passed, "{:?}", r.fits[0]);
    }

    #[test]
    fn record_samples_nodes() {
        let t = solve_eigentriplet_hoc(&hoc("x"), 1e-14).unwrap();
        let r = t.record();
        assert_eq!(r.nodes.len(), DEFAULT_NODES);
        assert!((r.h[0] - t.h(r.nodes[0])).abs() < 1e-15);
    }
}
