//! Gauss–Legendre and Gauss–Hermite rules, and integrators on `[0, 1]`.

use std::f64::consts::PI;

/// Nodes and weights of an `n`-point rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Legendre rule on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Rule {
    let base = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    Rule {
        nodes: base.nodes.iter().map(|z| mid + half * z).collect(),
        weights: base.weights.iter().map(|w| half * w).collect(),
    }
}

/// Gauss–Hermite rule for the weight `exp(-x^2)`, nodes ascending.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // Orthonormal Hermite recurrence.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 3e-15 * z.abs().max(1.0) {
                break;
            }
        }
        // nodes[] holds the descending positive roots while iterating.
        nodes[i] = z;
        weights[i] = 2.0 / (pp * pp);
    }
    let positive: Vec<(f64, f64)> = (0..m).map(|i| (nodes[i], weights[i])).collect();
    for (i, &(x, w)) in positive.iter().enumerate() {
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

/// Expectation `E[g(sigma * Z)]` for standard normal `Z` using a Gauss–Hermite rule.
pub fn gaussian_expectation(rule: &Rule, sigma: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
    let scale = std::f64::consts::SQRT_2 * sigma;
    let norm = 1.0 / PI.sqrt();
    norm * rule.nodes.iter().zip(&rule.weights).map(|(&x, &w)| w * g(scale * x)).sum::<f64>()
}

/// Composite integrator on `[lower, 1]` with geometrically graded panels.
///
/// Panels are `[2^-(k+1), 2^-k]` down to `lower` (or down to `2^-depth`
/// followed by `[0, 2^-depth]` when `lower == 0`). Each panel uses a
/// Gauss–Legendre rule; the order doubles until two successive totals
/// agree within `tol` (absolute or relative, whichever is looser).
#[derive(Debug, Clone)]
pub struct UnitIntegrator {
    pub lower: f64,
    pub depth: u32,
    pub tol: f64,
    pub initial_order: usize,
    pub max_order: usize,
}

impl Default for UnitIntegrator {
    fn default() -> Self {
        Self { lower: 0.0, depth: 44, tol: 1e-13, initial_order: 16, max_order: 256 }
    }
}

/// Result of an integral evaluation with its convergence record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    /// Difference between the last two refinements.
    pub error_estimate: f64,
    pub converged: bool,
}

impl UnitIntegrator {
    /// Integrator for `[cutoff, 1]`, used for improper integrals with a
    /// positive integrand where truncation only under-estimates.
    pub fn with_cutoff(cutoff: f64) -> Self {
        Self { lower: cutoff, ..Self::default() }
    }

    fn panels(&self) -> Vec<(f64, f64)> {
        let mut panels = Vec::new();
        let mut hi = 1.0f64;
        for _ in 0..self.depth {
            let lo = 0.5 * hi;
            if lo <= self.lower {
                break;
            }
            panels.push((lo, hi));
            hi = lo;
        }
        if hi > self.lower {
            panels.push((self.lower, hi));
        }
        panels
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> Integral {
        let panels = self.panels();
        let eval = |order: usize| -> f64 {
            let base = gauss_legendre(order);
            // Small panels first so the sum accumulates from small to large terms.
            panels
                .iter()
                .rev()
                .map(|&(a, b)| {
                    let half = 0.5 * (b - a);
                    let mid = 0.5 * (b + a);
                    half * base.nodes.iter().zip(&base.weights).map(|(&z, &w)| w * f(mid + half * z)).sum::<f64>()
                })
                .sum()
        };
        let mut order = self.initial_order;
        let mut previous = eval(order);
        loop {
            let next_order = order * 2;
            if next_order > self.max_order {
                return Integral { value: previous, error_estimate: f64::NAN, converged: false };
            }
            let current = eval(next_order);
            let diff = (current - previous).abs();
            if diff <= self.tol * current.abs().max(1.0) || !current.is_finite() {
                return Integral { value: current, error_estimate: diff, converged: current.is_finite() };
            }
            previous = current;
            order = next_order;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 64, 256] {
            let rule = gauss_legendre(n);
            let total: f64 = rule.weights.iter().sum();
            assert!((total - 2.0).abs() < 1e-13, "n={n} weight sum {total}");
            // Exact for degree 2n-1.
            let deg = (2 * n - 1).min(40);
            let approx = rule.integrate(|x| x.powi(deg as i32 - (deg as i32 % 2)));
            let even = deg - deg % 2;
            let exact = 2.0 / (even as f64 + 1.0);
            assert!((approx - exact).abs() < 1e-12, "n={n}: {approx} vs {exact}");
            assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn legendre_five_point_reference_nodes() {
        // Tabulated values.
        let rule = gauss_legendre(5);
        assert!((rule.nodes[4] - 0.906_179_845_938_664).abs() < 1e-14);
        assert!((rule.weights[4] - 0.236_926_885_056_189).abs() < 1e-14);
        assert!((rule.weights[2] - 0.568_888_888_888_889).abs() < 1e-14);
    }

    #[test]
    fn hermite_moments() {
        for n in [2usize, 10, 64] {
            let rule = gauss_hermite(n);
            let norm = PI.sqrt();
            assert!((rule.weights.iter().sum::<f64>() - norm).abs() < 1e-12 * norm);
            // E[Z^2] = 1 and E[Z^4] = 3 under the standard normal.
            let m2 = gaussian_expectation(&rule, 1.0, |z| z * z);
            let m4 = gaussian_expectation(&rule, 1.0, |z| z.powi(4));
            assert!((m2 - 1.0).abs() < 1e-12, "n={n} m2={m2}");
            if n > 2 {
                assert!((m4 - 3.0).abs() < 1e-11, "n={n} m4={m4}");
            }
            assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn hermite_characteristic_function() {
        let rule = gauss_hermite(64);
        for (a, s) in [(1.0, 1.0), (2.0, 0.7), (0.25, 3.0)] {
            let approx = gaussian_expectation(&rule, s, |z| (a * z).cos());
            let exact = (-0.5f64 * a * a * s * s).exp();
            assert!((approx - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_integrator_handles_endpoint_singularities() {
        let integ = UnitIntegrator::default();
        let lambda = 1.0 / (std::f64::consts::E - 1.0);
        let r = integ.integrate(|x| 1.0 / (lambda + x));
        assert!(r.converged);
        assert!((r.value - 1.0).abs() < 1e-14);
        let r = integ.integrate(|x| x.sqrt());
        assert!((r.value - 2.0 / 3.0).abs() < 1e-12);
        let r = integ.integrate(|x| 1.0 / (1e-9 + x));
        let exact = ((1.0 + 1e-9) / 1e-9f64).ln();
        assert!((r.value - exact).abs() < 1e-9 * exact, "{} vs {exact}", r.value);
    }

    #[test]
    fn cutoff_integrator_for_divergent_log() {
        let integ = UnitIntegrator::with_cutoff(1e-8);
        let r = integ.integrate(|x| 1.0 / x);
        assert!((r.value - 1e8f64.ln()).abs() < 1e-10);
    }
}
