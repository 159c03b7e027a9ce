//! The experiment pipeline: model, eigen-triplet, ensemble, estimators, artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bmp_core::fluctuations::{self as fl, FluctuationError, MomentSource, RateVerdict, ScaleKind};
use bmp_core::model::{ModelError, TraitSpace};
use bmp_core::semigroup::{self, Regime, RegimeKind, SemigroupError, DEFAULT_NODES};
use bmp_core::simulator::{self, SimulationError};
use bmp_core::{stats, EigenTriplet, EnsembleSpec, Execution, MomentSolver, StreamSeed, TestFunction};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ExperimentConfig, ModelConfig, RegimeChoice};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("oracle: {0}")]
    Semigroup(#[from] SemigroupError),
    #[error("simulation: {0}")]
    Simulation(#[from] SimulationError),
    #[error("estimator: {0}")]
    Fluctuation(#[from] FluctuationError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads; the global pool when `None`.
    pub threads: Option<usize>,
    /// Number of leading replicas whose event logs are dumped.
    pub dump_trajectories: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub subject: String,
    pub status: Status,
    pub detail: String,
    /// CSV file holding the numbers behind the verdict.
    pub artifact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionSummary {
    pub name: String,
    pub gamma_f: f64,
    pub scale: Option<ScaleKind>,
    /// Time at which `sigma2` was read off.
    pub sigma2_t: Option<f64>,
    pub sigma2: Option<f64>,
    pub sigma2_se: Option<f64>,
    pub stabilized: Option<bool>,
    /// Expected value of the estimator at `(sigma2_t, horizon)`.
    pub oracle_finite: Option<f64>,
    /// Limit as `t` and the horizon grow.
    pub oracle_limit: Option<f64>,
    pub h_profile_residual: Option<f64>,
    pub distance: Option<f64>,
    pub threshold: Option<f64>,
    pub rate_fit: Option<fl::RateFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Runtime {
    pub wall_clock_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    /// Hash of every artifact and of this report without `runtime`.
    pub report_hash: String,
    pub model: String,
    pub seed: u64,
    pub x0: f64,
    pub h_x0: f64,
    pub grid: Vec<f64>,
    pub horizon: f64,
    /// Grid times at which the horizon controls the proxy bias.
    pub eligible_times: Vec<f64>,
    pub replicas: usize,
    pub kept: usize,
    pub truncated: usize,
    pub truncation_fraction: f64,
    pub events: u64,
    pub lambda: f64,
    pub rho: f64,
    pub raw_gap: f64,
    pub h_norm_residual: f64,
    pub gamma_h_residual: f64,
    pub regime: Regime,
    pub regime_overridden: bool,
    pub functions: Vec<FunctionSummary>,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime: Option<Runtime>,
}

/// In-memory copy of every written artifact, for hashing.
struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn csv<R: Serialize>(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<(), RunError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        self.put(name, bytes)
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &bytes)?;
        self.files.insert(name.to_string(), bytes);
        Ok(())
    }

    fn hash(&self, extra: &[u8]) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in &self.files {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        h.update(extra);
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    hex(&Sha256::digest(config.canonical().as_bytes()))
}

fn model_name(config: &ExperimentConfig) -> &'static str {
    match config.model {
        ModelConfig::Yule { .. } => "yule",
        ModelConfig::FiniteType { .. } => "finite_type",
        ModelConfig::HouseOfCards { .. } => "house_of_cards",
    }
}

/// Test functions in registration order: `h`, `one`, then the configured ones.
pub fn registered_functions(config: &ExperimentConfig, triplet: &EigenTriplet) -> Vec<TestFunction> {
    let h = triplet.h_function();
    let mut out = vec![h.clone(), TestFunction::ones()];
    for f in &config.analysis.functions {
        let base = TestFunction::from_expr(f.name.clone(), f.expr.clone());
        if f.centered {
            let g = triplet.gamma_of(|x| base.eval(x));
            let h = h.clone();
            out.push(TestFunction::new(f.name.clone(), move |x| base.eval(x) - g * h.eval(x)));
        } else {
            out.push(base);
        }
    }
    out
}

/// Extension used when the config leaves it open.
pub fn auto_extension(lambda: f64) -> f64 {
    (2.0 * fl::min_extension(lambda)).ceil() / 2.0
}

pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, RunError> {
    let start = Instant::now();
    let model = config.build_model()?;
    let triplet = semigroup::solve_eigentriplet(&model)?;
    let lambda = triplet.lambda;
    let auto = semigroup::classify_regime(&triplet, config.analysis.critical_tol);
    let (regime, regime_overridden) = match config.analysis.regime {
        RegimeChoice::Auto => (auto, false),
        RegimeChoice::Fixed(kind) => (Regime { kind, ..auto }, kind != auto.kind),
    };
    let sim = &config.simulation;
    let x0 = sim.x0;
    let extension = sim.extension.unwrap_or_else(|| auto_extension(lambda));
    let functions = registered_functions(config, &triplet);
    let spec = EnsembleSpec {
        x0,
        grid: sim.grid.clone(),
        extension,
        replicas: sim.replicas,
        master_seed: sim.seed,
        cap: sim.cap,
        growth_rate: Some(lambda),
    };
    let horizon = spec.horizon();

    let (ensemble, threads) = match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| RunError::Pool(e.to_string()))?;
            (pool.install(|| simulator::simulate_ensemble(&model, &spec, &functions, Execution::Parallel))?, n)
        }
        None => (simulator::simulate_ensemble(&model, &spec, &functions, Execution::Parallel)?, rayon::current_num_threads()),
    };

    fs::create_dir_all(&opts.out_dir)?;
    let mut art = Artifacts { dir: opts.out_dir.clone(), files: BTreeMap::new() };
    let mut verdicts = Vec::new();
    let mut verdict = |check: &str, subject: &str, status: Status, detail: String, artifact: &str| {
        verdicts.push(Verdict { check: check.into(), subject: subject.into(), status, detail, artifact: artifact.into() });
    };

    let times = ensemble.times.clone();
    let mut rows = Vec::with_capacity(ensemble.replicas() * times.len() * functions.len());
    for r in 0..ensemble.replicas() {
        for (ti, &t) in times.iter().enumerate() {
            for (fi, f) in functions.iter().enumerate() {
                rows.push((r, t, f.name.as_str(), ensemble.value(r, ti, fi), ensemble.truncated[r]));
            }
        }
    }
    art.csv("ensemble.csv", &["replica", "t", "function", "value", "truncated"], rows)?;

    let record = triplet.record();
    art.csv("triplet.csv", &["node", "h", "gamma"], record.nodes.iter().zip(&record.h).zip(&record.gamma).map(|((n, h), g)| (n, h, g)))?;

    let frac = ensemble.truncation_fraction();
    verdict("truncation", "ensemble", Status::from_bool(frac < 0.01), format!("{} of {} replicas truncated", ensemble.truncation_count(), ensemble.replicas()), "ensemble.csv");
    if let Some(hoc) = &regime.hoc {
        verdict(
            "regime_integrals",
            "model",
            Status::from_bool(hoc.consistent),
            format!("alpha(0) = {}, predicted {:?}, classified {:?}", hoc.alpha_at_zero, hoc.predicted, auto.kind),
            "triplet.csv",
        );
    }

    // Oracles.
    let probes: Vec<f64> = match model.space() {
        TraitSpace::Finite { .. } => Vec::new(),
        TraitSpace::UnitInterval => vec![x0, 0.0, 0.25, 0.5, 0.75, 1.0],
    };
    let solver = MomentSolver::new(&model, &probes);
    let i0 = solver.index_of(x0)?;
    let profile: Vec<usize> = match model.space() {
        TraitSpace::Finite { types } => (0..types).collect(),
        TraitSpace::UnitInterval => (DEFAULT_NODES + 1..solver.len()).collect(),
    };
    let psi = solver.psi_infinity(&triplet)?;
    let m_psi_horizon = solver.mean(&psi, &[horizon])?[0][i0];
    let h_x0 = triplet.h(x0);

    let decay_functions: Vec<TestFunction> = functions[1..].to_vec();
    let decay = semigroup::verify_gap_decay(&model, &triplet, &sim.grid, &decay_functions)?;
    art.csv("decay.csv", &["t", "function", "x", "residual"], decay.rows.iter().map(|r| (r.t, r.function.as_str(), r.x, r.residual)))?;
    for fit in &decay.fits {
        verdict(
            "gap_decay",
            &fit.function,
            Status::from_bool(fit.passed),
            format!("fitted rate {:?}, rho {}, max residual {:e}", fit.rate, triplet.rho, fit.max_residual),
            "decay.csv",
        );
    }

    // W proxies.
    let eligible: Vec<f64> = sim.grid.iter().copied().filter(|&t| fl::estimate_w(&ensemble, &triplet, t, horizon).is_ok()).collect();
    let kept = ensemble.kept();
    let hz = ensemble.time_index(horizon).expect("horizon is observed");
    let w_horizon: Vec<f64> = ensemble.column(hz, 0).iter().map(|z| z * (-lambda * horizon).exp()).collect();
    art.csv("w.csv", &["replica", "w"], kept.iter().zip(&w_horizon))?;

    // Law of large numbers at the largest eligible time.
    let mut lln_rows = Vec::new();
    if let Some(&t) = eligible.last() {
        let w = fl::estimate_w(&ensemble, &triplet, t, horizon)?;
        for f in &functions {
            let g = if f.name == "h" { 1.0 } else { triplet.gamma_of(|x| f.eval(x)) };
            let f2 = solver.fluctuation_second_moment(&triplet, f, &[t])?[0][i0];
            let ms = (-2.0 * lambda * t).exp() * f2 - g * g * (-2.0 * lambda * horizon).exp() * m_psi_horizon;
            let c = fl::lln_check(&ensemble, &triplet, f, &w, ms.max(0.0).sqrt(), 5.0)?;
            lln_rows.push((f.name.clone(), t, c.statistic, c.threshold, c.passed));
            verdict("lln", &f.name, Status::from_bool(c.passed), format!("mean deviation {:e} vs {:e} at t={t}", c.statistic, c.threshold), "lln.csv");
        }
    } else {
        verdict("lln", "all", Status::Inconclusive, "no grid time is far enough from the horizon".into(), "lln.csv");
    }
    art.csv("lln.csv", &["function", "t", "statistic", "threshold", "passed"], lln_rows)?;

    // Martingale L2 trace against its exact finite-horizon expectation.
    let trace_times: Vec<f64> = sim.grid.iter().copied().filter(|&t| t < horizon).collect();
    let mut trace_rows = Vec::new();
    if trace_times.len() >= 2 {
        let trace = fl::martingale_l2_speed(&ensemble, &triplet, &trace_times, horizon)?;
        let m_psi = solver.mean(&psi, &trace_times)?;
        let limit = solver.gamma_on_points(&triplet, &psi) * h_x0;
        let mut ok = true;
        for (p, m) in trace.points.iter().zip(&m_psi) {
            let finite = (-lambda * p.t).exp() * m[i0] - (lambda * (p.t - 2.0 * horizon)).exp() * m_psi_horizon;
            ok &= p.value.within(finite, 3.0);
            trace_rows.push((p.t, p.value.value, p.value.se, finite, limit));
        }
        let last = trace.points.last().unwrap().value;
        verdict(
            "martingale_trace",
            "h",
            Status::from_bool(ok),
            format!("last {:.5} +- {:.5}, limit {limit:.5}, stabilized {}", last.value, last.se, trace.stabilized),
            "trace.csv",
        );
    }
    art.csv("trace.csv", &["t", "value", "se", "oracle_finite", "oracle_limit"], trace_rows)?;

    // Fluctuations for h and the configured functions.
    let mut summaries = Vec::new();
    let mut sample_rows = Vec::new();
    let mut variance_rows = Vec::new();
    let mut distance_rows = Vec::new();
    let mut rate_rows = Vec::new();
    let mut check_rows = Vec::new();
    let family = fl::default_family();
    let fluct: Vec<(usize, &TestFunction)> = functions.iter().enumerate().filter(|(i, _)| *i != 1).collect();
    for (idx, f) in fluct {
        let is_h = idx == 0;
        let gamma_f = if is_h { 1.0 } else { triplet.gamma_of(|x| f.eval(x)) };
        let mut summary = FunctionSummary {
            name: f.name.clone(),
            gamma_f,
            scale: None,
            sigma2_t: None,
            sigma2: None,
            sigma2_se: None,
            stabilized: None,
            oracle_finite: None,
            oracle_limit: None,
            h_profile_residual: None,
            distance: None,
            threshold: None,
            rate_fit: None,
        };
        let scale = match fl::ScaleKind::for_regime(regime.kind, is_h) {
            Ok(s) => s,
            Err(e) => {
                verdict("clt", &f.name, Status::Inconclusive, e.to_string(), "verdicts.csv");
                summaries.push(summary);
                continue;
            }
        };
        summary.scale = Some(scale);
        if eligible.is_empty() {
            verdict("clt", &f.name, Status::Inconclusive, "no grid time is far enough from the horizon".into(), "verdicts.csv");
            summaries.push(summary);
            continue;
        }
        let mut samples = Vec::new();
        for &t in &eligible {
            let w = fl::estimate_w(&ensemble, &triplet, t, horizon)?;
            let s = fl::fluctuation_samples(&ensemble, &triplet, regime.kind, f, &w)?;
            for ((r, y), w) in kept.iter().zip(&s.y).zip(&s.w) {
                sample_rows.push((f.name.clone(), t, *r, *y, *w));
            }
            samples.push(s);
        }
        let last = samples.last().unwrap();
        let t_last = last.t;
        let critical = scale == ScaleKind::Critical;

        // Centering against the exact mean of Y.
        let mean_f = solver.mean(&solver.sample(|x| f.eval(x)), &[t_last])?[0][i0];
        let expected_y = scale.factor(lambda, t_last) * (mean_f - (lambda * t_last).exp() * gamma_f * h_x0);
        let c = fl::centering_check(last, expected_y, 3.0);
        check_rows.push((f.name.clone(), t_last, "centering", c.statistic, c.threshold, c.passed));
        verdict("centering", &f.name, Status::from_bool(c.passed), format!("|mean Y - {expected_y:.4e}| = {:.4e}, 3 SE = {:.4e}", c.statistic, c.threshold), "checks.csv");

        // Variance: estimator, its finite-horizon expectation and the limit.
        let f2 = solver.fluctuation_second_moment(&triplet, f, &eligible)?;
        let limits = solver.variance_limits(&triplet, f)?;
        let oracle_limit = match scale {
            ScaleKind::Martingale => limits.gamma_psi,
            ScaleKind::Small => limits.sigma2_small,
            ScaleKind::Critical => limits.eta_critical,
        };
        let finite: Vec<f64> = eligible
            .iter()
            .zip(&f2)
            .map(|(&t, v)| {
                let s2 = scale.factor(lambda, t).powi(2);
                s2 * (v[i0] - gamma_f * gamma_f * (2.0 * lambda * (t - horizon)).exp() * m_psi_horizon) / h_x0
            })
            .collect();
        let last_f2 = f2.last().unwrap();
        let profile_values: Vec<f64> = profile.iter().map(|&i| last_f2[i] / triplet.h(solver.points()[i])).collect();
        summary.h_profile_residual = Some(fl::h_profile_residual(&profile_values));
        summary.oracle_finite = finite.last().copied();
        summary.oracle_limit = Some(oracle_limit);
        let sigma2 = if samples.len() >= 3 {
            let v = fl::estimate_sigma2(&samples, &triplet, x0)?;
            for ((t, e), o) in v.per_time.iter().zip(&finite) {
                variance_rows.push((f.name.clone(), *t, e.value, e.se, *o, oracle_limit));
            }
            summary.sigma2_t = Some(t_last);
            summary.sigma2 = Some(v.sigma2);
            summary.sigma2_se = Some(v.se);
            summary.stabilized = Some(v.stabilized);
            let o = *finite.last().unwrap();
            let detail = format!("{:.5} +- {:.5} at t={t_last}, expected {o:.5}, limit {oracle_limit:.5}", v.sigma2, v.se);
            if critical {
                verdict("variance", &f.name, Status::Inconclusive, format!("{detail}; critical scaling is slow to settle"), "variance.csv");
            } else {
                verdict("variance", &f.name, Status::from_bool((v.sigma2 - o).abs() <= 3.0 * v.se), detail, "variance.csv");
            }
            v.sigma2
        } else {
            verdict("variance", &f.name, Status::Inconclusive, format!("{} eligible grid times, need 3", samples.len()), "variance.csv");
            summaries.push(summary);
            continue;
        };

        // Distance to the Gaussian mixture along the grid.
        let reports: Vec<fl::DistanceReport> = samples.iter().map(|s| fl::distance_d(s, sigma2, &family)).collect();
        let cal = fl::calibrate_distance(&last.w, sigma2, &family, config.analysis.calibration_replicates, config.analysis.calibration_quantile, sim.seed ^ (0x5eed_0000 + idx as u64));
        for r in &reports {
            distance_rows.push((f.name.clone(), r.t, r.n, r.distance, r.se, format!("{:?}", r.argmax), r.ks.statistic, r.ks.p_value, cal.threshold));
        }
        let d_last = reports.last().unwrap();
        summary.distance = Some(d_last.distance);
        summary.threshold = Some(cal.threshold);
        let below = d_last.distance <= cal.threshold;
        let detail = format!("d = {:.5} at t={t_last}, calibrated {} quantile {:.5}, KS p = {:.4}", d_last.distance, cal.quantile, cal.threshold, d_last.ks.p_value);
        verdict("distance", &f.name, if critical { Status::Inconclusive } else { Status::from_bool(below) }, detail, "distance.csv");
        let trend = fl::non_increasing(&reports, 2.0);
        verdict("distance_trend", &f.name, Status::from_bool(trend), format!("{} grid times", reports.len()), "distance.csv");
        let theta = fl::theoretical_exponent(scale, lambda, triplet.rho);
        let fit = fl::rate_fit(&reports, theta, cal.threshold, sim.seed ^ (0xf17_0000 + idx as u64));
        let (lo, hi) = fit.ci.map_or((None, None), |(a, b)| (Some(a), Some(b)));
        rate_rows.push((f.name.clone(), fit.slope, lo, hi, fit.theoretical, fit.used, fit.noise_floor, fit.verdict));
        let status = match fit.verdict {
            RateVerdict::Consistent => Status::Pass,
            RateVerdict::Inconclusive => Status::Inconclusive,
            RateVerdict::Inconsistent => Status::Fail,
        };
        verdict("rate_fit", &f.name, status, fit.reason.clone(), "rate_fit.csv");
        summary.rate_fit = Some(fit);

        // Mixture structure of the limit.
        if sigma2 > 0.0 {
            let mix = fl::mixture_check(last, sigma2, 5, 0.01);
            check_rows.push((f.name.clone(), t_last, "mixture_ks_p", mix.pooled.p_value, 0.01, mix.passed));
            let ind = fl::independence_check(last, sigma2, 3.0);
            check_rows.push((f.name.clone(), t_last, "independence_corr", ind.statistic, ind.threshold, ind.passed));
            let (m, i) = if critical { (Status::Inconclusive, Status::Inconclusive) } else { (Status::from_bool(mix.passed), Status::from_bool(ind.passed)) };
            verdict("mixture", &f.name, m, format!("pooled KS p = {:.4}", mix.pooled.p_value), "checks.csv");
            verdict("independence", &f.name, i, format!("|corr| = {:.4} vs {:.4}", ind.statistic, ind.threshold), "checks.csv");
        }
        summaries.push(summary);
    }
    art.csv("fluctuations.csv", &["function", "t", "replica", "y", "w"], sample_rows)?;
    art.csv("variance.csv", &["function", "t", "estimate", "se", "oracle_finite", "oracle_limit"], variance_rows)?;
    art.csv("distance.csv", &["function", "t", "n", "distance", "se", "argmax", "ks_statistic", "ks_p_value", "threshold"], distance_rows)?;
    art.csv("rate_fit.csv", &["function", "slope", "ci_low", "ci_high", "theoretical", "used", "noise_floor", "verdict"], rate_rows)?;
    art.csv("checks.csv", &["function", "t", "check", "statistic", "threshold", "passed"], check_rows)?;

    // Moment growth of f_hat.
    let growth_functions: Vec<&TestFunction> = if functions.len() > 2 { functions[2..].iter().collect() } else { vec![&functions[1]] };
    let mut moment_rows = Vec::new();
    let mut fit_rows = Vec::new();
    for f in growth_functions {
        for &k in &config.analysis.moment_orders {
            let (source, label) = if k <= 2 {
                (MomentSource::Oracle { solver: &solver, x0 }, "oracle")
            } else {
                (MomentSource::Ensemble(&ensemble), "monte_carlo")
            };
            let subject = format!("{} k={k}", f.name);
            let g = fl::moment_growth_check(source, &triplet, regime.kind, model.moment_order(), k, f, &sim.grid)?;
            for (t, m) in g.times.iter().zip(&g.moments) {
                moment_rows.push((f.name.clone(), k, label, *t, m.value, m.se));
            }
            let degenerate = g.moments.iter().any(|m| !(m.value > 1e-14));
            fit_rows.push((f.name.clone(), k, label, g.expected_slope, g.slope, g.slope_corrected, g.aic_plain, g.aic_corrected, g.passed && !degenerate, g.third_order_slope));
            let (status, detail) = if degenerate {
                (Status::Inconclusive, "f - gamma(f) h vanishes".to_string())
            } else if k == 1 && triplet.is_house_of_cards() {
                (Status::Inconclusive, format!("slope {:.4}; the gap edge is continuous spectrum, so the mean decay is not exponential", g.slope))
            } else if regime.kind == RegimeKind::Large && k >= 2 {
                (Status::Inconclusive, format!("slope {:.4}; no growth prediction in the large regime", g.slope))
            } else {
                (Status::from_bool(g.passed), format!("slope {:.4} (corrected {:.4}), expected {:.4}", g.slope, g.slope_corrected, g.expected_slope))
            };
            verdict("moment_growth", &subject, status, detail, "moment_fits.csv");
        }
    }
    art.csv("moments.csv", &["function", "k", "source", "t", "moment", "se"], moment_rows)?;
    art.csv(
        "moment_fits.csv",
        &["function", "k", "source", "expected_slope", "slope", "slope_corrected", "aic_plain", "aic_corrected", "passed", "third_order_slope"],
        fit_rows,
    )?;

    for r in 0..opts.dump_trajectories.min(sim.replicas) {
        let traj = simulator::simulate_trajectory(&model, x0, horizon, StreamSeed::replica(sim.seed, r), sim.cap)?;
        let mut buf = Vec::new();
        traj.write_tsv(&mut buf)?;
        art.put(&format!("trajectories/replica_{r:05}.tsv"), buf)?;
    }

    art.csv(
        "verdicts.csv",
        &["check", "subject", "status", "detail", "artifact"],
        verdicts.iter().map(|v| (&v.check, &v.subject, v.status.as_str(), &v.detail, &v.artifact)),
    )?;

    let passed = verdicts.iter().all(|v| v.status != Status::Fail);
    let mut report = ExperimentReport {
        config_hash: config_hash(config),
        report_hash: String::new(),
        model: model_name(config).into(),
        seed: sim.seed,
        x0,
        h_x0,
        grid: sim.grid.clone(),
        horizon,
        eligible_times: eligible,
        replicas: ensemble.replicas(),
        kept: kept.len(),
        truncated: ensemble.truncation_count(),
        truncation_fraction: frac,
        events: ensemble.events.iter().sum(),
        lambda,
        rho: triplet.rho,
        raw_gap: triplet.raw_gap,
        h_norm_residual: record.h_norm_residual,
        gamma_h_residual: record.gamma_h_residual,
        regime,
        regime_overridden,
        functions: summaries,
        verdicts,
        passed,
        runtime: None,
    };
    let body = serde_json::to_vec(&report).expect("report serializes");
    report.report_hash = art.hash(&body);
    report.runtime = Some(Runtime { wall_clock_seconds: start.elapsed().as_secs_f64(), threads });
    if config.output.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(opts.out_dir.join("summary.json"), text + "\n")?;
    }
    Ok(report)
}

/// Per-replica CSV rows of `ensemble.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow {
    pub replica: usize,
    pub t: f64,
    pub function: String,
    pub value: f64,
    pub truncated: bool,
}

pub fn read_ensemble(path: &Path) -> Result<Vec<EnsembleRow>, RunError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let (replica, t, function, value, truncated): (usize, f64, String, f64, bool) = rec?;
        out.push(EnsembleRow { replica, t, function, value, truncated });
    }
    Ok(out)
}

/// One recomputed quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotCheck {
    pub quantity: String,
    pub reported: f64,
    pub recomputed: f64,
    pub agrees: bool,
}

/// Recomputes the variance estimates, distances' inputs and the LLN
/// statistics of a finished run from `ensemble.csv` and `summary.json`.
pub fn spot_check(dir: &Path) -> Result<Vec<SpotCheck>, RunError> {
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json"))?).map_err(|e| io::Error::other(e.to_string()))?;
    let rows = read_ensemble(&dir.join("ensemble.csv"))?;
    let num = |v: &serde_json::Value| v.as_f64().unwrap_or(f64::NAN);
    let lambda = num(&summary["lambda"]);
    let h_x0 = num(&summary["h_x0"]);
    let horizon = num(&summary["horizon"]);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300);
    let column = |t: f64, name: &str| -> Vec<f64> {
        rows.iter().filter(|r| !r.truncated && r.function == name && (r.t - t).abs() <= 1e-12 * (1.0 + t)).map(|r| r.value).collect()
    };
    let w: Vec<f64> = column(horizon, "h").iter().map(|z| z * (-lambda * horizon).exp()).collect();
    let mut out = Vec::new();
    let kept = w.len() as f64;
    out.push(SpotCheck { quantity: "kept replicas".into(), reported: num(&summary["kept"]), recomputed: kept, agrees: num(&summary["kept"]) == kept });
    if let Some(fs) = summary["functions"].as_array() {
        for f in fs {
            let (Some(name), Some(t)) = (f["name"].as_str(), f["sigma2_t"].as_f64()) else { continue };
            let gamma_f = num(&f["gamma_f"]);
            let factor = match f["scale"].as_str() {
                Some("critical") => (-0.5 * lambda * t).exp() / t.sqrt(),
                _ => (-0.5 * lambda * t).exp(),
            };
            let growth = (lambda * t).exp();
            let y: Vec<f64> = column(t, name).iter().zip(&w).map(|(z, w)| factor * (z - growth * gamma_f * w)).collect();
            let sigma2 = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64 / h_x0).max(0.0);
            let reported = num(&f["sigma2"]);
            out.push(SpotCheck { quantity: format!("sigma2[{name}] at t={t}"), reported, recomputed: sigma2, agrees: close(reported, sigma2) });
        }
    }
    let lln = csv::Reader::from_path(dir.join("lln.csv"))?.deserialize::<(String, f64, f64, f64, bool)>().collect::<Result<Vec<_>, _>>()?;
    for (name, t, statistic, _, _) in lln {
        let gamma_f = summary["functions"]
            .as_array()
            .and_then(|fs| fs.iter().find(|f| f["name"] == name.as_str()))
            .map(|f| num(&f["gamma_f"]));
        let Some(gamma_f) = gamma_f else { continue };
        let scale = (-lambda * t).exp();
        let dev: Vec<f64> = column(t, &name).iter().zip(&w).map(|(z, w)| (z * scale - gamma_f * w).abs()).collect();
        let recomputed = stats::mean(&dev);
        out.push(SpotCheck { quantity: format!("lln[{name}] at t={t}"), reported: statistic, recomputed, agrees: close(statistic, recomputed) });
    }
    Ok(out)
}
