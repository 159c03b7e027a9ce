//! Experiment configuration files (TOML).
//!
//! ```toml
//! [model]
//! kind = "house_of_cards"      # yule | finite_type | house_of_cards
//! alpha = "x"
//!
//! [simulation]
//! x0 = 0.5
//! grid = [2, 4, 6, 8]
//! extension = 8                # optional, chosen from lambda when absent
//! replicas = 2000
//! seed = 7                     # required
//!
//! [analysis]
//! functions = [{ name = "x", expr = "x" }, { name = "xc", expr = "x", centered = true }]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use bmp_core::expr::Expr;
use bmp_core::model::{self, FiniteChannel, HouseOfCardsParams, Model, Realization};
use bmp_core::simulator::DEFAULT_CAP;
use bmp_core::RegimeKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_GRID: [f64; 3] = [2.0, 4.0, 6.0];
pub const DEFAULT_REPLICAS: usize = 1000;
pub const DEFAULT_MOMENT_ORDER: u32 = 4;

/// One problem in a config file, located by its key path.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: {} problem(s)\n{}", .violations.len(), list(.violations))]
    Invalid { path: PathBuf, violations: Vec<Violation> },
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  - {x}")).collect::<Vec<_>>().join("\n")
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid { violations, .. } => violations,
            _ => &[],
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<RawModel>,
    simulation: Option<RawSimulation>,
    #[serde(default)]
    analysis: RawAnalysis,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<String>,
    b: Option<f64>,
    channels: Option<Vec<FiniteChannel>>,
    alpha: Option<String>,
    realization: Option<RawRealization>,
    weight: Option<String>,
    moment_order: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRealization {
    rate: String,
    offspring: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    x0: Option<f64>,
    grid: Option<Vec<f64>>,
    extension: Option<f64>,
    replicas: Option<usize>,
    cap: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    #[serde(default)]
    functions: Vec<RawFunction>,
    regime: Option<String>,
    critical_tol: Option<f64>,
    calibration_replicates: Option<usize>,
    calibration_quantile: Option<f64>,
    moment_orders: Option<Vec<u32>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFunction {
    name: String,
    expr: String,
    #[serde(default)]
    centered: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    formats: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Yule { b: f64 },
    FiniteType { channels: Vec<FiniteChannel> },
    HouseOfCards { params: HouseOfCardsParams },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub x0: f64,
    pub grid: Vec<f64>,
    /// `None`: the smallest half-unit multiple meeting the proxy-bias requirement.
    pub extension: Option<f64>,
    pub replicas: usize,
    pub cap: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeChoice {
    Auto,
    Fixed(RegimeKind),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionConfig {
    pub name: String,
    pub expr: Expr,
    /// Use `f - gamma(f) h` instead of `f`.
    pub centered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub functions: Vec<FunctionConfig>,
    pub regime: RegimeChoice,
    pub critical_tol: f64,
    pub calibration_replicates: usize,
    pub calibration_quantile: f64,
    pub moment_orders: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub weight: Option<Expr>,
    pub moment_order: u32,
    pub simulation: SimulationConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn build_model(&self) -> Result<Model, model::ModelError> {
        let m = match &self.model {
            ModelConfig::Yule { b } => model::make_yule(*b)?,
            ModelConfig::FiniteType { channels } => model::make_finite_type_channels(channels.clone())?,
            ModelConfig::HouseOfCards { params } => model::make_house_of_cards(params.clone())?,
        };
        let m = match &self.weight {
            Some(w) => m.with_weight(w.clone())?,
            None => m,
        };
        m.with_moment_order(self.moment_order)
    }

    /// Canonical JSON form; whitespace and key order in the file do not matter.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Names reserved for functions registered by the runner.
pub const RESERVED: [&str; 2] = ["h", "one"];

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    parse_str(&text).map_err(|e| match e {
        ParseFailure::Syntax(message) => ConfigError::Syntax { path: path.into(), message },
        ParseFailure::Invalid(violations) => ConfigError::Invalid { path: path.into(), violations },
    })
}

#[derive(Debug)]
pub enum ParseFailure {
    Syntax(String),
    Invalid(Vec<Violation>),
}

pub fn parse_str(text: &str) -> Result<ExperimentConfig, ParseFailure> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ParseFailure::Syntax(e.to_string().trim_end().to_string()))?;
    let mut v = Vec::new();
    let mut bad = |location: &str, message: String| v.push(Violation { location: location.into(), message });

    let m = raw.model.unwrap_or_default();
    let model = match m.kind.as_deref() {
        None => {
            bad("model.kind", "missing field (yule, finite_type or house_of_cards)".into());
            None
        }
        Some("yule") => Some(ModelConfig::Yule { b: m.b.unwrap_or(1.0) }),
        Some("finite_type") => match m.channels {
            Some(channels) if !channels.is_empty() => Some(ModelConfig::FiniteType { channels }),
            _ => {
                bad("model.channels", "finite_type needs at least one [[model.channels]] entry".into());
                None
            }
        },
        Some("house_of_cards") => match &m.alpha {
            None => {
                bad("model.alpha", "house_of_cards needs an alpha expression".into());
                None
            }
            Some(src) => match Expr::parse(src) {
                Err(e) => {
                    bad("model.alpha", e.to_string());
                    None
                }
                Ok(alpha) => {
                    let realization = match &m.realization {
                        None => Some(Realization::Minimal),
                        Some(r) => {
                            let rate = Expr::parse(&r.rate).map_err(|e| bad("model.realization.rate", e.to_string())).ok();
                            let offspring: Vec<Option<Expr>> = r
                                .offspring
                                .iter()
                                .enumerate()
                                .map(|(k, s)| Expr::parse(s).map_err(|e| bad(&format!("model.realization.offspring[{k}]"), e.to_string())).ok())
                                .collect();
                            match (rate, offspring.into_iter().collect::<Option<Vec<_>>>()) {
                                (Some(rate), Some(offspring)) => Some(Realization::Explicit { rate, offspring }),
                                _ => None,
                            }
                        }
                    };
                    realization.map(|realization| ModelConfig::HouseOfCards { params: HouseOfCardsParams { alpha, realization } })
                }
            },
        },
        Some(other) => {
            bad("model.kind", format!("unknown model kind '{other}'"));
            None
        }
    };
    let weight = m.weight.as_deref().and_then(|s| Expr::parse(s).map_err(|e| bad("model.weight", e.to_string())).ok());
    let moment_order = m.moment_order.unwrap_or(DEFAULT_MOMENT_ORDER);

    let s = raw.simulation.unwrap_or_default();
    if s.seed.is_none() {
        bad("simulation.seed", "seed required".into());
    }
    let grid = s.grid.unwrap_or_else(|| DEFAULT_GRID.to_vec());
    if grid.is_empty() || grid[0] <= 0.0 || grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|t| !t.is_finite()) {
        bad("simulation.grid", "must be a non-empty, strictly increasing list of positive times".into());
    }
    if let Some(e) = s.extension {
        if !(e >= 0.0 && e.is_finite()) {
            bad("simulation.extension", format!("must be non-negative, got {e}"));
        }
    }
    let replicas = s.replicas.unwrap_or(DEFAULT_REPLICAS);
    if replicas < 64 {
        bad("simulation.replicas", format!("need at least 64 replicas for batched errors, got {replicas}"));
    }
    let cap = s.cap.unwrap_or(DEFAULT_CAP);
    if cap == 0 {
        bad("simulation.cap", "must be at least 1".into());
    }
    let x0 = s.x0.unwrap_or(0.0);

    let a = raw.analysis;
    let mut functions = Vec::new();
    for (i, f) in a.functions.iter().enumerate() {
        let loc = format!("analysis.functions[{i}]");
        if RESERVED.contains(&f.name.as_str()) {
            bad(&loc, format!("name '{}' is reserved", f.name));
        } else if f.name.is_empty() || f.name.contains([',', '"', '\n']) {
            bad(&loc, format!("invalid name '{}'", f.name));
        } else if functions.iter().any(|g: &FunctionConfig| g.name == f.name) {
            bad(&loc, format!("duplicate name '{}'", f.name));
        }
        match Expr::parse(&f.expr) {
            Ok(expr) => functions.push(FunctionConfig { name: f.name.clone(), expr, centered: f.centered }),
            Err(e) => bad(&format!("{loc}.expr"), e.to_string()),
        }
    }
    let regime = match a.regime.as_deref() {
        None | Some("auto") => RegimeChoice::Auto,
        Some("small") => RegimeChoice::Fixed(RegimeKind::Small),
        Some("critical") => RegimeChoice::Fixed(RegimeKind::Critical),
        Some("large") => RegimeChoice::Fixed(RegimeKind::Large),
        Some(other) => {
            bad("analysis.regime", format!("expected auto, small, critical or large, got '{other}'"));
            RegimeChoice::Auto
        }
    };
    let critical_tol = a.critical_tol.unwrap_or(bmp_core::semigroup::CRITICAL_TOL);
    if !(critical_tol > 0.0 && critical_tol < 1.0) {
        bad("analysis.critical_tol", format!("must lie in (0, 1), got {critical_tol}"));
    }
    let calibration_replicates = a.calibration_replicates.unwrap_or(200);
    if calibration_replicates < 20 {
        bad("analysis.calibration_replicates", format!("need at least 20, got {calibration_replicates}"));
    }
    let calibration_quantile = a.calibration_quantile.unwrap_or(0.99);
    if !(calibration_quantile > 0.5 && calibration_quantile < 1.0) {
        bad("analysis.calibration_quantile", format!("must lie in (0.5, 1), got {calibration_quantile}"));
    }
    let moment_orders = a.moment_orders.unwrap_or_else(|| vec![1, 2]);
    for &k in &moment_orders {
        if k == 0 || k > moment_order {
            bad("analysis.moment_orders", format!("order {k} outside 1..={moment_order}"));
        }
    }

    let json = match &raw.output.formats {
        None => true,
        Some(f) => {
            for x in f {
                if x != "csv" && x != "json" {
                    bad("output.formats", format!("unknown format '{x}' (csv, json)"));
                }
            }
            if !f.iter().any(|x| x == "csv") {
                bad("output.formats", "csv is required; every verdict is backed by a CSV file".into());
            }
            f.iter().any(|x| x == "json")
        }
    };

    let config = match model {
        Some(model) if v.is_empty() => Some(ExperimentConfig {
            model,
            weight,
            moment_order,
            simulation: SimulationConfig { x0, grid, extension: s.extension, replicas, cap, seed: s.seed.unwrap_or(0) },
            analysis: AnalysisConfig { functions, regime, critical_tol, calibration_replicates, calibration_quantile, moment_orders },
            output: OutputConfig { dir: raw.output.dir, json },
        }),
        _ => None,
    };
    if let Some(c) = &config {
        match c.build_model() {
            Err(e) => v.push(Violation { location: "model".into(), message: e.to_string() }),
            Ok(m) => {
                if !m.space().contains(c.simulation.x0) {
                    v.push(Violation { location: "simulation.x0".into(), message: format!("{} is not a trait of this model", c.simulation.x0) });
                }
            }
        }
    }
    match config {
        Some(c) if v.is_empty() => Ok(c),
        _ => Err(ParseFailure::Invalid(v)),
    }
}
