//! Estimators for the martingale limit `W`, the fluctuations
//! `Y_t = S(t) (Z_t(f) - e^{lambda t} gamma(f) W)`, their limiting
//! variances, a test-function distance to the Gaussian mixture
//! `sigma sqrt(W) Z`, and moment growth exponents.
//!
//! `W` is not observable. It is replaced by `W_T = e^{-lambda T} Z_T(h)`
//! at an extension horizon `T > t`; by orthogonality of martingale
//! increments the proxy error `e^{lambda t / 2} (W - W_T)` has second
//! moment `e^{lambda t} e^{-2 lambda T} M_T psi_inf`, so its scale is
//! `e^{-lambda (T - t) / 2}` relative to the fluctuations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::quadrature::{gauss_hermite, gaussian_expectation, Rule};
use crate::semigroup::{EigenTriplet, MomentSolver, RegimeKind, SemigroupError};
use crate::simulator::{Ensemble, TestFunction};
use crate::stats::{self, Estimate, KsResult};

/// Gauss–Hermite nodes for the inner Gaussian expectation.
pub const HERMITE_NODES: usize = 64;
/// Largest allowed ratio of the proxy bias to the fluctuation scale.
pub const MAX_PROXY_BIAS: f64 = 0.1;
/// Scale attached to the proxy bias `e^{-lambda T / 2}`.
pub const BIAS_SCALE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluctuationError {
    #[error("ensemble has no observations of function '{0}'")]
    MissingFunction(String),
    #[error("ensemble has no observation at t={0}")]
    MissingTime(f64),
    #[error("extension horizon T={horizon} is too close to t={t}: proxy bias {bias} exceeds {limit}")]
    HorizonTooShort { t: f64, horizon: f64, bias: f64, limit: f64 },
    #[error("no central limit theorem in the large branching regime")]
    UnsupportedRegime,
    #[error("process is not supercritical: lambda = {0}")]
    NotSupercritical(f64),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew { what: &'static str, needed: usize, got: usize },
    #[error("moment order {k} exceeds the model's moment order {kappa}")]
    MomentOrder { k: u32, kappa: u32 },
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
}

fn column(ensemble: &Ensemble, t: f64, name: &str) -> Result<Vec<f64>, FluctuationError> {
    let ti = ensemble.time_index(t).ok_or(FluctuationError::MissingTime(t))?;
    let fi = ensemble.function_index(name).ok_or_else(|| FluctuationError::MissingFunction(name.to_string()))?;
    Ok(ensemble.column(ti, fi))
}

/// Per-replica proxies `W_T = e^{-lambda T} Z_T(h)` for one observation time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WEstimate {
    pub t: f64,
    pub horizon: f64,
    /// Over the non-truncated replicas, in replica order.
    pub values: Vec<f64>,
    /// `BIAS_SCALE * e^{-lambda T / 2}`.
    pub bias_proxy: f64,
    /// `e^{-lambda t / 2}`, the fluctuation scale it is compared with.
    pub fluctuation_scale: f64,
}

/// Smallest `T - t` meeting the proxy-bias requirement.
pub fn min_extension(lambda: f64) -> f64 {
    2.0 * (BIAS_SCALE / MAX_PROXY_BIAS).ln() / lambda
}

pub fn estimate_w(ensemble: &Ensemble, triplet: &EigenTriplet, t: f64, horizon: f64) -> Result<WEstimate, FluctuationError> {
    let lambda = triplet.lambda;
    if lambda <= 0.0 {
        return Err(FluctuationError::NotSupercritical(lambda));
    }
    let bias_proxy = BIAS_SCALE * (-0.5 * lambda * horizon).exp();
    let fluctuation_scale = (-0.5 * lambda * t).exp();
    if !(horizon > t) || bias_proxy >= MAX_PROXY_BIAS * fluctuation_scale {
        return Err(FluctuationError::HorizonTooShort { t, horizon, bias: bias_proxy, limit: MAX_PROXY_BIAS * fluctuation_scale });
    }
    let scale = (-lambda * horizon).exp();
    let values = column(ensemble, horizon, "h")?.into_iter().map(|z| z * scale).collect();
    Ok(WEstimate { t, horizon, values, bias_proxy, fluctuation_scale })
}

/// One point of the martingale L2 trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub t: f64,
    /// `e^{lambda t} mean (W_T - W_t)^2`.
    pub value: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L2Trace {
    pub horizon: f64,
    pub points: Vec<TracePoint>,
    /// Last two values agree within 3 combined standard errors.
    pub stabilized: bool,
}

/// `e^{lambda t} E[(W - W_t)^2]` with `W` replaced by `W_T`.
pub fn martingale_l2_speed(ensemble: &Ensemble, triplet: &EigenTriplet, times: &[f64], horizon: f64) -> Result<L2Trace, FluctuationError> {
    let lambda = triplet.lambda;
    let w_t = column(ensemble, horizon, "h")?;
    let mut points = Vec::new();
    for &t in times {
        let z = column(ensemble, t, "h")?;
        let (a, b) = ((lambda * t).exp(), (-lambda * horizon).exp());
        let records: Vec<f64> = z.iter().zip(&w_t).map(|(zt, zh)| a * (b * zh - zt / a).powi(2)).collect();
        points.push(TracePoint { t, value: stats::batch_estimate(&records, stats::mean) });
    }
    if points.len() < 2 {
        return Err(FluctuationError::TooFew { what: "trace times", needed: 2, got: points.len() });
    }
    let (p, q) = (points[points.len() - 2].value, points[points.len() - 1].value);
    let stabilized = (p.value - q.value).abs() <= 3.0 * p.se.hypot(q.se);
    Ok(L2Trace { horizon, points, stabilized })
}

/// Which scaling `S(t)` a sample uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    /// `e^{-lambda t/2}` with `f = h`.
    Martingale,
    /// `e^{-lambda t/2}`.
    Small,
    /// `t^{-1/2} e^{-lambda t/2}`.
    Critical,
}

impl ScaleKind {
    pub fn for_regime(regime: RegimeKind, f_is_h: bool) -> Result<Self, FluctuationError> {
        if f_is_h {
            return Ok(ScaleKind::Martingale);
        }
        match regime {
            RegimeKind::Small => Ok(ScaleKind::Small),
            RegimeKind::Critical => Ok(ScaleKind::Critical),
            RegimeKind::Large => Err(FluctuationError::UnsupportedRegime),
        }
    }

    pub fn factor(&self, lambda: f64, t: f64) -> f64 {
        let base = (-0.5 * lambda * t).exp();
        match self {
            ScaleKind::Martingale | ScaleKind::Small => base,
            ScaleKind::Critical => base / t.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluctuationSample {
    pub t: f64,
    pub function: String,
    pub scale: ScaleKind,
    pub gamma_f: f64,
    pub y: Vec<f64>,
    /// Paired `W_T`.
    pub w: Vec<f64>,
}

/// `Y_t` per non-truncated replica. `f` must be registered in the ensemble under its name.
pub fn fluctuation_samples(
    ensemble: &Ensemble,
    triplet: &EigenTriplet,
    regime: RegimeKind,
    f: &TestFunction,
    w: &WEstimate,
) -> Result<FluctuationSample, FluctuationError> {
    let is_h = f.name == "h";
    let scale = ScaleKind::for_regime(regime, is_h)?;
    let t = w.t;
    let gamma_f = if is_h { 1.0 } else { triplet.gamma_of(|x| f.eval(x)) };
    let z = column(ensemble, t, &f.name)?;
    let s = scale.factor(triplet.lambda, t);
    let growth = (triplet.lambda * t).exp();
    let y = z.iter().zip(&w.values).map(|(z, w)| s * (z - growth * gamma_f * w)).collect();
    Ok(FluctuationSample { t, function: f.name.clone(), scale, gamma_f, y, w: w.values.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceTarget {
    /// `sigma_h^2 = gamma(psi_inf)`.
    Martingale,
    /// `sigma_{f,s}^2`.
    Small,
    /// `sigma_{f,c}^2`.
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceEstimate {
    pub target: VarianceTarget,
    pub function: String,
    /// `mean(Y_t^2) / h(x0)` per grid time.
    pub per_time: Vec<(f64, Estimate)>,
    /// Value at the last grid time, floored at zero.
    pub sigma2: f64,
    pub se: f64,
    /// Last two grid values agree within 3 combined standard errors.
    pub stabilized: bool,
}

/// `sigma^2` from the rescaled second moment of the fluctuation samples.
pub fn estimate_sigma2(samples: &[FluctuationSample], triplet: &EigenTriplet, x0: f64) -> Result<VarianceEstimate, FluctuationError> {
    if samples.len() < 3 {
        return Err(FluctuationError::TooFew { what: "grid times", needed: 3, got: samples.len() });
    }
    let hx = triplet.h(x0);
    let per_time: Vec<(f64, Estimate)> = samples
        .iter()
        .map(|s| {
            let sq: Vec<f64> = s.y.iter().map(|y| y * y / hx).collect();
            (s.t, stats::batch_estimate(&sq, stats::mean))
        })
        .collect();
    let target = match samples[0].scale {
        ScaleKind::Martingale => VarianceTarget::Martingale,
        ScaleKind::Small => VarianceTarget::Small,
        ScaleKind::Critical => VarianceTarget::Critical,
    };
    let last = per_time[per_time.len() - 1].1;
    let prev = per_time[per_time.len() - 2].1;
    Ok(VarianceEstimate {
        target,
        function: samples[0].function.clone(),
        sigma2: last.value.max(0.0),
        se: last.se,
        stabilized: (last.value - prev.value).abs() <= 3.0 * last.se.hypot(prev.se),
        per_time,
    })
}

/// Largest relative deviation of `sigma2(x0) / mean` across starting points;
/// the limit is proportional to `h(x0)`, so the rescaled values should agree.
pub fn h_profile_residual(estimates: &[f64]) -> f64 {
    let m = stats::mean(estimates);
    estimates.iter().map(|v| (v / m - 1.0).abs()).fold(0.0, f64::max)
}

/// A member of the finite test-function family. Every member satisfies
/// `max(|F|, |F'|, |F''|, |F'''|) <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Member {
    /// `c sin(a x)` with `c = min(1, a^-3)`.
    Sin { a: f64 },
    /// `c cos(a x)` with `c = min(1, a^-3)`.
    Cos { a: f64 },
    /// `c exp(-(x - mu)^2 / (2 s^2))`, `c` from the derivative bounds.
    Bump { mu: f64, s: f64 },
}

/// `sup |d^k/dx^k exp(-x^2/2)|` for `k = 1, 2, 3`, rounded up.
const BUMP_DERIVATIVE_SUP: [f64; 3] = [0.606_531, 1.0, 1.380_15];

impl Member {
    pub fn coefficient(&self) -> f64 {
        match *self {
            Member::Sin { a } | Member::Cos { a } => 1.0f64.min(a.powi(-3)),
            Member::Bump { s, .. } => {
                let [d1, d2, d3] = BUMP_DERIVATIVE_SUP;
                1.0f64.min(s / d1).min(s * s / d2).min(s.powi(3) / d3)
            }
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let c = self.coefficient();
        match *self {
            Member::Sin { a } => c * (a * x).sin(),
            Member::Cos { a } => c * (a * x).cos(),
            Member::Bump { mu, s } => c * (-(x - mu).powi(2) / (2.0 * s * s)).exp(),
        }
    }
}

/// The documented finite subfamily used for the distance.
pub fn default_family() -> Vec<Member> {
    let mut family = Vec::new();
    for a in [0.25, 0.5, 1.0, 2.0, 4.0] {
        family.push(Member::Sin { a });
        family.push(Member::Cos { a });
    }
    for mu in [-1.0, 0.0, 1.0] {
        for s in [0.5, 1.0, 2.0] {
            family.push(Member::Bump { mu, s });
        }
    }
    family
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceReport {
    pub t: f64,
    pub n: usize,
    /// `max_F |mean F(Y) - mean E F(sigma sqrt(W) Z)|` over the family.
    pub distance: f64,
    /// Standard error of the maximizing member's difference.
    pub se: f64,
    pub argmax: Member,
    pub family_size: usize,
    /// KS test of `Y` against the mixture `mean_i Phi(. / (sigma sqrt(W_i)))`,
    /// or against a point mass at 0 when `sigma = 0`.
    pub ks: KsResult,
}

/// Per-replica inner expectations `E F(sigma sqrt(W_i) Z)` for each member.
fn inner_expectations(family: &[Member], w: &[f64], sigma: f64, rule: &Rule) -> Vec<Vec<f64>> {
    family
        .iter()
        .map(|m| w.iter().map(|&wi| gaussian_expectation(rule, sigma * wi.max(0.0).sqrt(), |z| m.eval(z))).collect())
        .collect()
}

fn distance_with(family: &[Member], inner: &[Vec<f64>], y: &[f64]) -> (f64, f64, usize) {
    let mut best = (-1.0, 0.0, 0);
    for (k, m) in family.iter().enumerate() {
        let diffs: Vec<f64> = y.iter().zip(&inner[k]).map(|(&yi, e)| m.eval(yi) - e).collect();
        let d = stats::mean(&diffs).abs();
        if d > best.0 {
            best = (d, stats::standard_error(&diffs), k);
        }
    }
    best
}

/// Mixture CDF `mean_i Phi(y / (sigma sqrt(W_i)))`.
fn mixture_cdf(w: &[f64], sigma: f64) -> impl Fn(f64) -> f64 + '_ {
    move |y| {
        let total: f64 = w
            .iter()
            .map(|&wi| {
                let sd = sigma * wi.max(0.0).sqrt();
                if sd > 0.0 {
                    stats::normal_cdf(y / sd)
                } else if y >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .sum();
        total / w.len() as f64
    }
}

pub fn distance_d(sample: &FluctuationSample, sigma2: f64, family: &[Member]) -> DistanceReport {
    let sigma = sigma2.max(0.0).sqrt();
    let rule = gauss_hermite(HERMITE_NODES);
    let inner = inner_expectations(family, &sample.w, sigma, &rule);
    let (distance, se, k) = distance_with(family, &inner, &sample.y);
    let ks = if sigma > 0.0 {
        stats::ks_one_sample(&sample.y, mixture_cdf(&sample.w, sigma))
    } else {
        let n = sample.y.len();
        let below = sample.y.iter().filter(|y| **y < 0.0).count() as f64 / n as f64;
        let above = sample.y.iter().filter(|y| **y > 0.0).count() as f64 / n as f64;
        let statistic = below.max(above);
        KsResult { statistic, p_value: stats::ks_pvalue(statistic, n as f64), n }
    };
    DistanceReport { t: sample.t, n: sample.y.len(), distance, se, argmax: family[k], family_size: family.len(), ks }
}

/// Distribution of the distance on exact-limit samples `sigma sqrt(W_i) Z_i`
/// built from the observed `W` and fresh normals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub replicates: usize,
    pub quantile: f64,
    pub threshold: f64,
    pub median: f64,
}

pub fn calibrate_distance(w: &[f64], sigma2: f64, family: &[Member], replicates: usize, quantile: f64, seed: u64) -> Calibration {
    let sigma = sigma2.max(0.0).sqrt();
    let rule = gauss_hermite(HERMITE_NODES);
    let inner = inner_expectations(family, w, sigma, &rule);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; w.len()];
    let mut values = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        for (yi, &wi) in y.iter_mut().zip(w) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *yi = sigma * wi.max(0.0).sqrt() * z;
        }
        values.push(distance_with(family, &inner, &y).0);
    }
    Calibration {
        replicates,
        quantile,
        threshold: stats::quantile(&values, quantile),
        median: stats::quantile(&values, 0.5),
    }
}

/// Distances along the grid do not increase by more than `k` combined standard errors.
pub fn non_increasing(reports: &[DistanceReport], k: f64) -> bool {
    reports.windows(2).all(|p| p[1].distance <= p[0].distance + k * p[0].se.hypot(p[1].se))
}

/// Theoretical exponent of the distance bound, `None` in the critical case.
pub fn theoretical_exponent(scale: ScaleKind, lambda: f64, rho: f64) -> Option<f64> {
    match scale {
        ScaleKind::Martingale => Some(-lambda * rho / (2.0 * rho + lambda)),
        ScaleKind::Small => Some(lambda * (lambda - 2.0 * rho) / (2.0 * (lambda + 2.0 * rho))),
        ScaleKind::Critical => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateVerdict {
    Consistent,
    Inconclusive,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub theoretical: Option<f64>,
    /// Points above the noise floor used in the fit.
    pub used: usize,
    pub noise_floor: f64,
    pub verdict: RateVerdict,
    pub reason: String,
}

/// Least-squares slope of `log d` against `t`, with a 95% parametric
/// bootstrap interval that resamples each distance from `N(d, se^2)`.
///
/// Only distances above `noise_floor` enter the fit. The theory gives an
/// upper bound, so a slope steeper than the exponent is consistent; the
/// verdict is "inconsistent" only when the whole interval lies above it.
pub fn rate_fit(reports: &[DistanceReport], theoretical: Option<f64>, noise_floor: f64, seed: u64) -> RateFit {
    let above: Vec<&DistanceReport> = reports.iter().filter(|r| r.distance > noise_floor).collect();
    let mut fit = RateFit { slope: None, ci: None, theoretical, used: above.len(), noise_floor, verdict: RateVerdict::Inconclusive, reason: String::new() };
    if reports.len() < 4 {
        fit.reason = format!("{} grid times, need 4", reports.len());
        return fit;
    }
    if above.len() < 3 {
        fit.reason = format!("only {} distances above the noise floor {noise_floor:.4}", above.len());
        return fit;
    }
    let t: Vec<f64> = above.iter().map(|r| r.t).collect();
    let d: Vec<f64> = above.iter().map(|r| r.distance).collect();
    let se: Vec<f64> = above.iter().map(|r| r.se).collect();
    let slope = stats::linear_fit(&t, &d.iter().map(|v| v.ln()).collect::<Vec<_>>()).slope;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(2000);
    for _ in 0..2000 {
        let y: Vec<f64> = d
            .iter()
            .zip(&se)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (m + s * z).max(1e-12 * m).ln()
            })
            .collect();
        slopes.push(stats::linear_fit(&t, &y).slope);
    }
    let ci = (stats::quantile(&slopes, 0.025), stats::quantile(&slopes, 0.975));
    fit.slope = Some(slope);
    fit.ci = Some(ci);
    match theoretical {
        None => {
            fit.reason = "no theoretical exponent".into();
        }
        Some(theta) if ci.0 > theta => {
            fit.verdict = RateVerdict::Inconsistent;
            fit.reason = format!("interval ({:.4}, {:.4}) lies above {theta:.4}", ci.0, ci.1);
        }
        Some(theta) => {
            fit.verdict = RateVerdict::Consistent;
            fit.reason = format!("interval ({:.4}, {:.4}) reaches {theta:.4}", ci.0, ci.1);
        }
    }
    fit
}

/// Where moments come from in a growth check.
pub enum MomentSource<'a> {
    /// Deterministic first/second moments (`k <= 2`) at `x0`.
    Oracle { solver: &'a MomentSolver, x0: f64 },
    /// Monte Carlo: `mean |Z_t(f) - gamma(f) Z_t(h)|^k` over an ensemble.
    Ensemble(&'a Ensemble),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentGrowthReport {
    pub k: u32,
    pub function: String,
    pub times: Vec<f64>,
    /// `E|Z_t(f_hat)|^k` (with standard errors for Monte Carlo).
    pub moments: Vec<Estimate>,
    pub expected_slope: f64,
    /// Slope of `log E|Z_t(f_hat)|^k` against `t`.
    pub slope: f64,
    /// Slope after removing `floor(k/2) log t`.
    pub slope_corrected: f64,
    pub aic_plain: f64,
    pub aic_corrected: f64,
    /// The regime-appropriate slope is within 10% of the expectation.
    pub passed: bool,
    /// For `k = 3`: slope of the rescaled third moment (bounded means about 0).
    pub third_order_slope: Option<f64>,
}

/// Checks the exponential growth rate of `E|Z_t(f_hat)|^k`, `f_hat = f - gamma(f) h`.
///
/// Expected exponents: `k = 1` decays with the semigroup, slope
/// `lambda - raw_gap`; otherwise `k lambda / 2`, with an extra
/// `t^{floor(k/2)}` factor in the critical regime.
pub fn moment_growth_check(
    source: MomentSource<'_>,
    triplet: &EigenTriplet,
    regime: RegimeKind,
    kappa: u32,
    k: u32,
    f: &TestFunction,
    times: &[f64],
) -> Result<MomentGrowthReport, FluctuationError> {
    if k > kappa {
        return Err(FluctuationError::MomentOrder { k, kappa });
    }
    if times.len() < 3 {
        return Err(FluctuationError::TooFew { what: "times", needed: 3, got: times.len() });
    }
    let g = triplet.gamma_of(|x| f.eval(x));
    let moments: Vec<Estimate> = match source {
        MomentSource::Oracle { solver, x0 } => {
            if k > 2 {
                return Err(FluctuationError::TooFew { what: "Monte Carlo replicas for k > 2", needed: 1, got: 0 });
            }
            let i = solver.index_of(x0)?;
            let fhat = solver.sample(|x| f.eval(x) - g * triplet.h(x));
            let m = solver.second_moment(&fhat, times)?;
            m.iter()
                .map(|m| Estimate { value: if k == 1 { m.first[i].abs() } else { m.second[i] }, se: 0.0 })
                .collect()
        }
        MomentSource::Ensemble(ens) => times
            .iter()
            .map(|&t| {
                let zf = column(ens, t, &f.name)?;
                let zh = column(ens, t, "h")?;
                let x: Vec<f64> = zf.iter().zip(&zh).map(|(a, b)| a - g * b).collect();
                Ok(if k == 1 {
                    // The signed mean decays; its absolute value is the moment of interest.
                    let e = stats::batch_estimate(&x, stats::mean);
                    Estimate { value: e.value.abs(), se: e.se }
                } else {
                    stats::batch_estimate(&x, |s| s.iter().map(|v| v.abs().powi(k as i32)).sum::<f64>() / s.len() as f64)
                })
            })
            .collect::<Result<_, FluctuationError>>()?,
    };
    let lambda = triplet.lambda;
    let logs: Vec<f64> = moments.iter().map(|m| m.value.ln()).collect();
    let poly = (k / 2) as f64;
    let corrected: Vec<f64> = logs.iter().zip(times).map(|(l, t)| l - poly * t.ln()).collect();
    let plain_fit = stats::linear_fit(times, &logs);
    let corrected_fit = stats::linear_fit(times, &corrected);
    let n = times.len();
    let expected_slope = if k == 1 { lambda - triplet.raw_gap } else { k as f64 * lambda / 2.0 };
    let critical = regime == RegimeKind::Critical && k >= 2;
    let used = if critical { corrected_fit.slope } else { plain_fit.slope };
    let passed = (used - expected_slope).abs() <= 0.1 * expected_slope.abs();
    let third_order_slope = (k == 3).then(|| {
        let power = if regime == RegimeKind::Critical { 1.5 } else { 0.0 };
        let rescaled: Vec<f64> = logs.iter().zip(times).map(|(l, t)| l - 1.5 * lambda * t - power * t.ln()).collect();
        stats::linear_fit(times, &rescaled).slope
    });
    Ok(MomentGrowthReport {
        k,
        function: f.name.clone(),
        times: times.to_vec(),
        moments,
        expected_slope,
        slope: plain_fit.slope,
        slope_corrected: corrected_fit.slope,
        aic_plain: stats::aic(plain_fit.rss, n, 2),
        aic_corrected: stats::aic(corrected_fit.rss, n, 2),
        passed,
        third_order_slope,
    })
}

/// Monte Carlo `E|Z_t(f) - e^{lambda t} gamma(f) W_T|^k` with a batch standard error.
pub fn fluctuation_moment(ensemble: &Ensemble, triplet: &EigenTriplet, f: &TestFunction, w: &WEstimate, k: i32) -> Result<Estimate, FluctuationError> {
    let g = if f.name == "h" { 1.0 } else { triplet.gamma_of(|x| f.eval(x)) };
    let z = column(ensemble, w.t, &f.name)?;
    let growth = (triplet.lambda * w.t).exp();
    let x: Vec<f64> = z.iter().zip(&w.values).map(|(z, w)| (z - growth * g * w).abs().powi(k)).collect();
    Ok(stats::batch_estimate(&x, stats::mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Check {
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Law of large numbers: `mean |e^{-lambda t} Z_t(f) - gamma(f) W_T|` against
/// `rms + k SE`, where `rms` is the exact root-mean-square of the deviation.
/// The mean absolute deviation cannot exceed `rms`, which shrinks like
/// `e^{-lambda t / 2}`.
pub fn lln_check(ensemble: &Ensemble, triplet: &EigenTriplet, f: &TestFunction, w: &WEstimate, rms: f64, k: f64) -> Result<Check, FluctuationError> {
    let g = if f.name == "h" { 1.0 } else { triplet.gamma_of(|x| f.eval(x)) };
    let scale = (-triplet.lambda * w.t).exp();
    let z = column(ensemble, w.t, &f.name)?;
    let dev: Vec<f64> = z.iter().zip(&w.values).map(|(a, b)| (a * scale - g * b).abs()).collect();
    let statistic = stats::mean(&dev);
    let threshold = rms + k * stats::standard_error(&dev);
    Ok(Check { statistic, threshold, passed: statistic <= threshold })
}

/// `|mean Y - expected| <= k SE`.
pub fn centering_check(sample: &FluctuationSample, expected: f64, k: f64) -> Check {
    let e = stats::batch_estimate(&sample.y, stats::mean);
    let statistic = (e.value - expected).abs();
    let threshold = k * e.se;
    Check { statistic, threshold, passed: statistic <= threshold }
}

/// Standardized residuals `Y / (sigma sqrt(W))` over replicas with `W > 0`.
pub fn standardized(sample: &FluctuationSample, sigma2: f64) -> (Vec<f64>, Vec<f64>) {
    let sigma = sigma2.sqrt();
    sample.y.iter().zip(&sample.w).filter(|(_, w)| **w > 0.0).map(|(y, w)| (y / (sigma * w.sqrt()), *w)).unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureCheck {
    pub pooled: KsResult,
    /// KS p-values per `W` quantile bin.
    pub bins: Vec<KsResult>,
    pub passed: bool,
}

/// Normality of `Y / (sigma sqrt(W))` pooled over `bins` quantile bins of `W`.
pub fn mixture_check(sample: &FluctuationSample, sigma2: f64, bins: usize, level: f64) -> MixtureCheck {
    let (z, w) = standardized(sample, sigma2);
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
    let per_bin: Vec<KsResult> = (0..bins)
        .map(|b| {
            let part: Vec<f64> = order[b * z.len() / bins..(b + 1) * z.len() / bins].iter().map(|&i| z[i]).collect();
            stats::ks_one_sample(&part, stats::normal_cdf)
        })
        .collect();
    let pooled = stats::ks_one_sample(&z, stats::normal_cdf);
    MixtureCheck { passed: pooled.passes(level), pooled, bins: per_bin }
}

/// Correlation between `Y / (sigma sqrt(W))` and `W`, against `k / sqrt(n)`.
pub fn independence_check(sample: &FluctuationSample, sigma2: f64, k: f64) -> Check {
    let (z, w) = standardized(sample, sigma2);
    let statistic = stats::correlation(&z, &w).abs();
    let threshold = k / (z.len() as f64).sqrt();
    Check { statistic, threshold, passed: statistic <= threshold }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, sigma: f64, seed: u64) -> FluctuationSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rand_distr::Exp1.sample(&mut rng)).collect();
        let y = w
            .iter()
            .map(|wi: &f64| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * wi.sqrt() * z
            })
            .collect();
        FluctuationSample { t: 1.0, function: "h".into(), scale: ScaleKind::Martingale, gamma_f: 1.0, y, w }
    }

    #[test]
    fn family_derivative_bounds() {
        // Finite differences on a fine grid for all four derivative norms.
        let h = 1e-3;
        for m in default_family() {
            let mut sup = [0.0f64; 4];
            let mut x = -30.0;
            while x <= 30.0 {
                let f = |d: f64| m.eval(x + d * h);
                sup[0] = sup[0].max(f(0.0).abs());
                sup[1] = sup[1].max(((f(1.0) - f(-1.0)) / (2.0 * h)).abs());
                sup[2] = sup[2].max(((f(1.0) - 2.0 * f(0.0) + f(-1.0)) / (h * h)).abs());
                sup[3] = sup[3].max(((f(2.0) - 2.0 * f(1.0) + 2.0 * f(-1.0) - f(-2.0)) / (2.0 * h * h * h)).abs());
                x += 0.0037;
            }
            for (k, s) in sup.iter().enumerate() {
                assert!(*s <= 1.0 + 1e-4, "{m:?} derivative {k}: {s}");
            }
        }
    }

    #[test]
    fn bump_derivative_constants() {
        let g = |x: f64| (-x * x / 2.0).exp();
        let d1 = |x: f64| (x * g(x)).abs();
        let d2 = |x: f64| ((x * x - 1.0) * g(x)).abs();
        let d3 = |x: f64| ((x.powi(3) - 3.0 * x) * g(x)).abs();
        let sup = |f: &dyn Fn(f64) -> f64| (0..100_000).map(|i| f(i as f64 * 1e-4)).fold(0.0, f64::max);
        assert!((sup(&d1) - 0.606_530_66).abs() < 1e-7 && sup(&d1) <= BUMP_DERIVATIVE_SUP[0]);
        assert!((sup(&d2) - 1.0).abs() < 1e-12);
        assert!(sup(&d3) <= BUMP_DERIVATIVE_SUP[2] && BUMP_DERIVATIVE_SUP[2] - sup(&d3) < 1e-4);
    }

    #[test]
    fn synthetic_distance_is_small() {
        let s = synthetic(10_000, 1.0, 3);
        let r = distance_d(&s, 1.0, &default_family());
        assert!(r.distance < 0.03, "{r:?}");
        assert!(r.ks.statistic < 1.63 / 100.0);
        let cal = calibrate_distance(&s.w, 1.0, &default_family(), 100, 0.99, 1);
        assert!(cal.threshold < 0.03 && cal.threshold > cal.median);
    }

    #[test]
    fn degenerate_distance_is_zero() {
        let s = FluctuationSample { t: 1.0, function: "f".into(), scale: ScaleKind::Small, gamma_f: 0.0, y: vec![0.0; 50], w: vec![1.0; 50] };
        let r = distance_d(&s, 0.0, &default_family());
        assert!(r.distance < 1e-12);
        assert_eq!(r.ks.statistic, 0.0);
    }

    #[test]
    fn unit_mixture_is_standard_normal() {
        let mut s = synthetic(5000, 1.0, 8);
        s.w = vec![1.0; 5000];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        s.y = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = distance_d(&s, 1.0, &default_family());
        assert!(r.ks.statistic < 1.63 / (5000f64).sqrt());
    }

    #[test]
    fn wrong_variance_is_detected() {
        let s = synthetic(10_000, 1.5, 11);
        let r = distance_d(&s, 1.0, &default_family());
        let cal = calibrate_distance(&s.w, 1.0, &default_family(), 50, 0.99, 2);
        assert!(r.distance > cal.threshold);
        assert!(!r.ks.passes(0.01));
    }

    fn report(t: f64, d: f64, se: f64) -> DistanceReport {
        DistanceReport {
            t,
            n: 1000,
            distance: d,
            se,
            argmax: Member::Sin { a: 1.0 },
            family_size: 1,
            ks: KsResult { statistic: 0.0, p_value: 1.0, n: 1000 },
        }
    }

    #[test]
    fn rate_fit_on_synthetic_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reports: Vec<DistanceReport> = (1..=8)
            .map(|i| {
                let t = i as f64;
                let d = (-0.3 * t).exp();
                let z: f64 = StandardNormal.sample(&mut rng);
                report(t, d * (1.0 + 0.01 * z), 0.01 * d)
            })
            .collect();
        let fit = rate_fit(&reports, Some(-0.3), 1e-3, 1);
        let (lo, hi) = fit.ci.unwrap();
        assert!(lo < -0.3 && hi > -0.3, "{fit:?}");
        assert!((fit.slope.unwrap() + 0.3).abs() < 0.01);
        assert_eq!(fit.verdict, RateVerdict::Consistent);
        // Theory demanding a faster decay than observed.
        assert_eq!(rate_fit(&reports, Some(-0.6), 1e-3, 1).verdict, RateVerdict::Inconsistent);
    }

    #[test]
    fn rate_fit_flat_noise_is_inconclusive() {
        let reports: Vec<DistanceReport> = (1..=6).map(|i| report(i as f64, 0.01, 0.005)).collect();
        let fit = rate_fit(&reports, Some(-0.3), 0.02, 1);
        assert_eq!(fit.verdict, RateVerdict::Inconclusive);
        assert!(non_increasing(&reports, 2.0));
    }

    #[test]
    fn mixture_and_independence_on_exact_samples() {
        let s = synthetic(5000, 0.8, 21);
        assert!(mixture_check(&s, 0.64, 5, 0.01).passed);
        assert!(independence_check(&s, 0.64, 3.0).passed);
        assert!(centering_check(&s, 0.0, 3.0).passed);
        assert!(!mixture_check(&s, 0.3, 5, 0.01).passed);
    }

    #[test]
    fn scale_kinds() {
        assert_eq!(ScaleKind::for_regime(RegimeKind::Large, true).unwrap(), ScaleKind::Martingale);
        assert_eq!(ScaleKind::for_regime(RegimeKind::Large, false), Err(FluctuationError::UnsupportedRegime));
        assert_eq!(ScaleKind::for_regime(RegimeKind::Critical, false).unwrap(), ScaleKind::Critical);
        assert!((ScaleKind::Critical.factor(2.0, 4.0) - (-4.0f64).exp() / 2.0).abs() < 1e-16);
        assert!((min_extension(1.0) - 2.0 * 10f64.ln()).abs() < 1e-12);
    }
}
