//! Small statistical toolkit: Kolmogorov–Smirnov tests, batch means,
//! least squares and a percentile bootstrap.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::erf::erfc;

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 32;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn standard_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Linear interpolation quantile, `q` in `[0, 1]`.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Estimate with a standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// `|value - target| <= k * se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }
}

/// Splits `0..n` into `batches` contiguous blocks of near-equal size.
fn batch_ranges(n: usize, batches: usize) -> Vec<std::ops::Range<usize>> {
    let b = batches.min(n).max(1);
    (0..b).map(|i| (i * n / b)..((i + 1) * n / b)).collect()
}

/// Statistic computed on the whole sample, with a batch-means standard error.
///
/// `stat` maps a slice of records to a number; it is evaluated on each of
/// [`BATCHES`] contiguous batches and the standard error is that of the
/// batch mean.
pub fn batch_estimate<T>(records: &[T], stat: impl Fn(&[T]) -> f64) -> Estimate {
    let value = stat(records);
    let per: Vec<f64> = batch_ranges(records.len(), BATCHES).into_iter().map(|r| stat(&records[r])).collect();
    let se = if per.len() > 1 { standard_error(&per) } else { f64::NAN };
    Estimate { value, se }
}

/// Kolmogorov distribution tail `P(K > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value of a KS statistic `d` with effective size `n`,
/// using Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let s = n.sqrt();
    kolmogorov_tail((s + 0.12 + 0.11 / s) * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

impl KsResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value > level
    }
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    // Tied values are compared as one block so that atoms of `cdf` are handled.
    while i < s.len() {
        let x = s[i];
        let mut j = i;
        while j < s.len() && s[j] == x {
            j += 1;
        }
        let below = cdf(x.next_down());
        let at = cdf(x);
        d = d.max((below - i as f64 / n).abs()).max((j as f64 / n - at).abs());
        i = j;
    }
    KsResult { statistic: d, p_value: ks_pvalue(d, n), n: s.len() }
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    KsResult { statistic: d, p_value: ks_pvalue(d, ne), n: x.len() + y.len() }
}

/// Ordinary least squares `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub rss: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if n > 2.0 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    LinearFit { slope, intercept, slope_se, rss }
}

/// Least squares with several regressors and an intercept; returns the coefficients and the RSS.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let n = y.len();
    let p = columns.len() + 1;
    let design = nalgebra::DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let target = nalgebra::DVector::from_column_slice(y);
    let svd = design.clone().svd(true, true);
    let beta = svd.solve(&target, 1e-12).expect("SVD was computed with U and V");
    let resid = target - design * &beta;
    (beta.iter().copied().collect(), resid.norm_squared())
}

/// Akaike information criterion of a Gaussian least-squares fit.
pub fn aic(rss: f64, n: usize, parameters: usize) -> f64 {
    n as f64 * (rss / n as f64).max(f64::MIN_POSITIVE).ln() + 2.0 * parameters as f64
}

/// Percentile bootstrap interval for a statistic of paired data.
pub fn bootstrap_interval(
    x: &[f64],
    y: &[f64],
    stat: impl Fn(&[f64], &[f64]) -> f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.len();
    let mut values = Vec::with_capacity(resamples);
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    for _ in 0..resamples {
        for k in 0..n {
            let i = rng.random_range(0..n);
            bx[k] = x[i];
            by[k] = y[i];
        }
        let v = stat(&bx, &by);
        if v.is_finite() {
            values.push(v);
        }
    }
    let alpha = 0.5 * (1.0 - level);
    (quantile(&values, alpha), quantile(&values, 1.0 - alpha))
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    #[test]
    fn kolmogorov_critical_values() {
        // Tabulated asymptotic critical values.
        assert!((kolmogorov_tail(1.6276) - 0.01).abs() < 2e-4);
        assert!((kolmogorov_tail(1.3581) - 0.05).abs() < 2e-4);
        assert!((kolmogorov_tail(1.2238) - 0.10).abs() < 2e-4);
        assert_eq!(kolmogorov_tail(0.0), 1.0);
    }

    #[test]
    fn ks_accepts_true_law_and_rejects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..5000).map(|_| Exp1.sample(&mut rng)).collect();
        let good = ks_one_sample(&x, |v| if v < 0.0 { 0.0 } else { 1.0 - (-v).exp() });
        assert!(good.passes(0.01), "{good:?}");
        let bad = ks_one_sample(&x, |v| if v < 0.0 { 0.0 } else { 1.0 - (-1.2 * v).exp() });
        assert!(!bad.passes(0.01));
    }

    #[test]
    fn ks_handles_an_atom_in_the_law() {
        // Half the mass at zero, half Exp(1).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..4000).map(|i| if i % 2 == 0 { 0.0 } else { Exp1.sample(&mut rng) }).collect();
        let cdf = |v: f64| if v < 0.0 { 0.0 } else { 0.5 + 0.5 * (1.0 - (-v).exp()) };
        let r = ks_one_sample(&x, cdf);
        assert!(r.statistic < 0.03, "{r:?}");
        assert!(r.passes(0.01));
    }

    #[test]
    fn ks_two_sample_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c: Vec<f64> = b.iter().map(|v: &f64| v + 0.2).collect();
        assert!(ks_two_sample(&a, &b).passes(0.01));
        assert!(!ks_two_sample(&a, &c).passes(0.01));
        // Identical samples.
        assert_eq!(ks_two_sample(&a, &a).statistic, 0.0);
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-11);
        assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-13);
    }

    #[test]
    fn batch_means_of_iid_match_classical_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..32_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = batch_estimate(&x, mean);
        assert!((e.se / standard_error(&x) - 1.0).abs() < 0.35);
        assert!(e.within(0.0, 4.0));
    }

    #[test]
    fn regression_and_bootstrap() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.3 * v).collect();
        let fit = linear_fit(&x, &y);
        assert!((fit.slope + 0.3).abs() < 1e-12 && (fit.intercept - 2.0).abs() < 1e-12);
        let (coef, rss) = least_squares(&[x.clone(), x.iter().map(|v| v * v).collect()], &y);
        assert!((coef[1] + 0.3).abs() < 1e-9 && coef[2].abs() < 1e-9 && rss < 1e-18);
        let (lo, hi) = bootstrap_interval(&x, &y, |a, b| linear_fit(a, b).slope, 200, 0.95, 1);
        assert!((lo + 0.3).abs() < 1e-9 && (hi + 0.3).abs() < 1e-9);
    }

    #[test]
    fn quantiles() {
        let x = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.5) - 2.5).abs() < 1e-15);
    }
}
