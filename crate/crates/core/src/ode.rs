//! Adaptive Dormand–Prince 5(4) integrator for autonomous systems `y' = F(y)`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("output times must be nonnegative and nondecreasing")]
    BadTimes,
    #[error("step size underflow at t={0}")]
    StepUnderflow(f64),
    #[error("exceeded {0} steps")]
    TooManySteps(usize),
    #[error("solution became non-finite at t={0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-11, atol: 1e-14, max_steps: 2_000_000 }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Error coefficients: fifth-order minus embedded fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates from `y(0) = y0` and returns the state at each of `times`.
/// The step is clipped to land exactly on every output time.
pub fn integrate<F>(mut rhs: F, y0: &[f64], times: &[f64], opts: OdeOptions) -> Result<Vec<Vec<f64>>, OdeError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[0] > w[1]) {
        return Err(OdeError::BadTimes);
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(times.len());
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    rhs(&y, &mut k1);
    let mut t = 0.0f64;
    let mut h = initial_step(&y, &k1, opts);
    let mut steps = 0usize;

    for &target in times {
        while t < target {
            steps += 1;
            if steps > opts.max_steps {
                return Err(OdeError::TooManySteps(opts.max_steps));
            }
            let remaining = target - t;
            let last = h >= remaining;
            let step = if last { remaining } else { h };
            for i in 0..n {
                tmp[i] = y[i] + step * A21 * k1[i];
            }
            rhs(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + step * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(&tmp, &mut k4);
            for i in 0..n {
                tmp[i] = y[i] + step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(&tmp, &mut k5);
            for i in 0..n {
                tmp[i] = y[i] + step * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(&tmp, &mut k6);
            for i in 0..n {
                ynew[i] = y[i] + step * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(&ynew, &mut k7);
            let mut err = 0.0;
            for i in 0..n {
                let e = step * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let scale = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
                err += (e / scale) * (e / scale);
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                return Err(OdeError::NonFinite(t));
            }
            if err <= 1.0 {
                t = if last { target } else { t + step };
                std::mem::swap(&mut y, &mut ynew);
                std::mem::swap(&mut k1, &mut k7);
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // Do not let a clipped final step shrink the next one.
            h = if last && err <= 1.0 { h.max(step * factor) } else { step * factor };
            if t < target && h < 1e-14 * t.max(1.0) {
                return Err(OdeError::StepUnderflow(t));
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step(y: &[f64], f: &[f64], opts: OdeOptions) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (yi, fi) in y.iter().zip(f) {
        let s = opts.atol + opts.rtol * yi.abs();
        d0 += (yi / s).powi(2);
        d1 += (fi / s).powi(2);
    }
    let n = y.len().max(1) as f64;
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-4
    } else {
        (0.01 * d0 / d1).clamp(1e-8, 0.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth() {
        let out = integrate(|y, dy| dy[0] = 1.3 * y[0], &[1.0], &[0.0, 1.0, 5.0], OdeOptions::default()).unwrap();
        assert_eq!(out[0][0], 1.0);
        assert!((out[1][0] / 1.3f64.exp() - 1.0).abs() < 1e-10);
        assert!((out[2][0] / 6.5f64.exp() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn harmonic_oscillator() {
        let out = integrate(
            |y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            &[1.0, 0.0],
            &[std::f64::consts::PI],
            OdeOptions::default(),
        )
        .unwrap();
        assert!((out[0][0] + 1.0).abs() < 1e-9);
        assert!(out[0][1].abs() < 1e-9);
    }

    #[test]
    fn rejects_decreasing_times() {
        assert!(integrate(|_, _| {}, &[1.0], &[2.0, 1.0], OdeOptions::default()).is_err());
    }
}
