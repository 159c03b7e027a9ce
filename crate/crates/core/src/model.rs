//! Trait spaces, branching mechanisms and the built-in model families.
//!
//! A [`Model`] is a list of independent event channels. Each channel fires
//! for a particle of trait `x` at rate `r(x)`; the particle is then
//! replaced by `k` children drawn from the channel's offspring law, placed
//! according to the channel's [`Placement`]. Traits never move between
//! events.
//!
//! Traits are `f64` throughout. On a finite space with `d` types the trait
//! of a particle is the type index stored exactly as `0.0, 1.0, ...`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;
use crate::quadrature::UnitIntegrator;

/// Points used for boundedness, continuity and sign checks on `[0, 1]`.
pub const VALIDATION_GRID: usize = 10_000;
/// Lower cutoff for the improper integral in the house-of-cards condition.
pub const HOC_INTEGRAL_CUTOFF: f64 = 1e-8;
const PROBABILITY_TOL: f64 = 1e-12;

pub type Trait = f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("birth rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("row {row} of the type kernel sums to {sum} instead of 1")]
    NonStochasticKernel { row: usize, sum: f64 },
    #[error("offspring law at trait {at} is not a probability vector (sum {sum}, min {min})")]
    BadOffspringLaw { at: f64, sum: f64, min: f64 },
    #[error("rate is negative or not finite at trait {at}: {value}")]
    BadRate { at: f64, value: f64 },
    #[error("weight function V must be positive and finite, got {value} at {at}")]
    BadWeight { at: f64, value: f64 },
    #[error("moment order must be at least 4, got {0}")]
    MomentOrder(u32),
    #[error("realization does not reproduce alpha at x={at}: alpha={alpha}, -r*sum (k-1)p_k = {realized}")]
    RealizationMismatch { at: f64, alpha: f64, realized: f64 },
    #[error("condition alpha(x) > alpha(0) fails at x={at}: alpha(x) - alpha(0) = {gap}")]
    SelectionCondition { at: f64, gap: f64 },
    #[error("integral of 1/(alpha(x) - alpha(0)) over [{cutoff}, 1] is {value}, must exceed 1")]
    IntegralCondition { value: f64, cutoff: f64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TraitSpace {
    Finite { types: usize },
    UnitInterval,
}

impl TraitSpace {
    pub fn contains(&self, x: Trait) -> bool {
        match *self {
            TraitSpace::Finite { types } => x >= 0.0 && x.fract() == 0.0 && (x as usize) < types,
            TraitSpace::UnitInterval => (0.0..=1.0).contains(&x),
        }
    }

    /// Points on which functions over the space are validated.
    pub fn validation_points(&self) -> Vec<Trait> {
        match *self {
            TraitSpace::Finite { types } => (0..types).map(|i| i as f64).collect(),
            TraitSpace::UnitInterval => (0..=VALIDATION_GRID).map(|i| i as f64 / VALIDATION_GRID as f64).collect(),
        }
    }
}

/// Event rate as a function of the trait.
#[derive(Debug, Clone, PartialEq)]
pub enum Rate {
    Constant(f64),
    PerType(Vec<f64>),
    Function(Expr),
    /// `|g(x)|`, used by the minimal house-of-cards realization.
    AbsOf(Expr),
}

impl Rate {
    #[inline]
    pub fn at(&self, x: Trait) -> f64 {
        match self {
            Rate::Constant(r) => *r,
            Rate::PerType(r) => r[x as usize],
            Rate::Function(e) => e.eval(x),
            Rate::AbsOf(e) => e.eval(x).abs(),
        }
    }
}

/// Law of the number of children produced when a channel fires.
#[derive(Debug, Clone, PartialEq)]
pub enum OffspringLaw {
    Fixed(Vec<f64>),
    PerType(Vec<Vec<f64>>),
    /// `p_k(x)` given by one expression per `k`.
    Function(Vec<Expr>),
    /// Death (`k = 0`) where `g(x) > 0`, binary fission where `g(x) < 0`.
    DeathOrBinary(Expr),
}

impl OffspringLaw {
    pub fn max_offspring(&self) -> usize {
        match self {
            OffspringLaw::Fixed(p) => p.len() - 1,
            OffspringLaw::PerType(ps) => ps.iter().map(|p| p.len() - 1).max().unwrap_or(0),
            OffspringLaw::Function(ps) => ps.len() - 1,
            OffspringLaw::DeathOrBinary(_) => 2,
        }
    }

    /// Probability vector at trait `x`, written into `out` (resized to `max_offspring + 1`).
    pub fn probabilities(&self, x: Trait, out: &mut Vec<f64>) {
        out.clear();
        match self {
            OffspringLaw::Fixed(p) => out.extend_from_slice(p),
            OffspringLaw::PerType(ps) => out.extend_from_slice(&ps[x as usize]),
            OffspringLaw::Function(ps) => out.extend(ps.iter().map(|e| e.eval(x))),
            OffspringLaw::DeathOrBinary(g) => {
                let v = g.eval(x);
                if v > 0.0 {
                    out.extend_from_slice(&[1.0, 0.0, 0.0]);
                } else if v < 0.0 {
                    out.extend_from_slice(&[0.0, 0.0, 1.0]);
                } else {
                    // Rate is zero here; the law is irrelevant.
                    out.extend_from_slice(&[0.0, 1.0, 0.0]);
                }
            }
        }
        let len = self.max_offspring() + 1;
        out.resize(len, 0.0);
    }

    /// Mean `sum k p_k` and second factorial moment `sum k(k-1) p_k` at `x`.
    pub fn factorial_moments(&self, x: Trait) -> (f64, f64) {
        let mut buf = Vec::new();
        self.probabilities(x, &mut buf);
        let mut m1 = 0.0;
        let mut f2 = 0.0;
        for (k, p) in buf.iter().enumerate() {
            let k = k as f64;
            m1 += k * p;
            f2 += k * (k - 1.0) * p;
        }
        (m1, f2)
    }

    /// Single-draw inverse-CDF sampling. Point masses consume no randomness.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, x: Trait, rng: &mut R) -> usize {
        match self {
            OffspringLaw::Fixed(p) => sample_vector(p, rng),
            OffspringLaw::PerType(ps) => sample_vector(&ps[x as usize], rng),
            OffspringLaw::Function(ps) => {
                if ps.len() == 1 {
                    return 0;
                }
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, e) in ps.iter().enumerate() {
                    acc += e.eval(x);
                    if u < acc {
                        return k;
                    }
                }
                last_positive(ps.iter().map(|e| e.eval(x)))
            }
            OffspringLaw::DeathOrBinary(g) => {
                if g.eval(x) > 0.0 {
                    0
                } else {
                    2
                }
            }
        }
    }
}

#[inline]
fn sample_vector<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    if let Some(k) = point_mass(p) {
        return k;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    last_positive(p.iter().copied())
}

#[inline]
fn point_mass(p: &[f64]) -> Option<usize> {
    let mut found = None;
    for (k, &pk) in p.iter().enumerate() {
        if pk == 1.0 {
            found = Some(k);
        } else if pk != 0.0 {
            return None;
        }
    }
    found
}

fn last_positive(p: impl Iterator<Item = f64>) -> usize {
    // Rounding can leave the cumulative sum a hair below u.
    p.enumerate().filter(|(_, pk)| *pk > 0.0).map(|(k, _)| k).last().unwrap_or(0)
}

/// Where the children of a firing particle are placed.
#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    /// Children inherit the parent's trait.
    Local,
    /// Each child independently draws its type from row `x` of a stochastic matrix.
    Kernel(Vec<Vec<f64>>),
    /// The parent survives and the drawn children get independent Uniform[0,1] traits.
    UniformImmigration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub rate: Rate,
    pub law: OffspringLaw,
    pub placement: Placement,
}

impl Channel {
    pub fn max_offspring(&self) -> usize {
        self.law.max_offspring()
    }

    pub fn parent_survives(&self) -> bool {
        matches!(self.placement, Placement::UniformImmigration)
    }
}

/// Parameters of the house-of-cards family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseOfCardsParams {
    /// Selection function `alpha(x) = -r(x) * sum_k (k-1) p_k(x)`.
    pub alpha: Expr,
    #[serde(default)]
    pub realization: Realization,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Realization {
    /// `r(x) = |alpha(x)|` with pure death where `alpha > 0` and binary
    /// fission where `alpha < 0`.
    #[default]
    Minimal,
    /// Explicit rate and offspring probabilities `p_0(x), ..., p_K(x)`.
    Explicit { rate: Expr, offspring: Vec<Expr> },
}

/// Values of the house-of-cards admissibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HocConditions {
    pub alpha_at_zero: f64,
    /// `min_{x in (0,1]} alpha(x) - alpha(0)` on the validation grid.
    pub min_selection_gap: f64,
    /// `int_cutoff^1 dx / (alpha(x) - alpha(0))`; infinite when the integrand is.
    pub integral: f64,
}

impl HouseOfCardsParams {
    pub fn new(alpha: &str) -> Result<Self, ModelError> {
        let alpha = Expr::parse(alpha).map_err(|e| ModelError::Invalid(e.to_string()))?;
        Ok(Self { alpha, realization: Realization::Minimal })
    }

    pub fn alpha(&self, x: f64) -> f64 {
        self.alpha.eval(x)
    }

    /// Checks the realization and both admissibility conditions.
    pub fn check(&self) -> Result<HocConditions, ModelError> {
        let grid = TraitSpace::UnitInterval.validation_points();
        if let Realization::Explicit { rate, offspring } = &self.realization {
            let law = OffspringLaw::Function(offspring.clone());
            let mut buf = Vec::new();
            for &x in &grid {
                let r = rate.eval(x);
                if !(r.is_finite() && r >= 0.0) {
                    return Err(ModelError::BadRate { at: x, value: r });
                }
                law.probabilities(x, &mut buf);
                check_probabilities(&buf, x)?;
                let (m1, _) = law.factorial_moments(x);
                let realized = -r * (m1 - 1.0);
                let a = self.alpha(x);
                if (realized - a).abs() > 1e-9 * (1.0 + a.abs()) {
                    return Err(ModelError::RealizationMismatch { at: x, alpha: a, realized });
                }
            }
        }
        let a0 = self.alpha(0.0);
        let mut min_gap = f64::INFINITY;
        let mut degenerate = false;
        for &x in &grid[1..] {
            let a = self.alpha(x);
            if !a.is_finite() {
                return Err(ModelError::Invalid(format!("alpha is not finite at x={x}")));
            }
            let gap = a - a0;
            min_gap = min_gap.min(gap);
            // Equality is admitted: constant alpha has a well-defined
            // eigen-triplet and an infinite integrand.
            if gap < -1e-14 {
                return Err(ModelError::SelectionCondition { at: x, gap });
            }
            if gap.abs() <= 1e-14 {
                degenerate = true;
            }
        }
        let integral = if degenerate {
            f64::INFINITY
        } else {
            UnitIntegrator::with_cutoff(HOC_INTEGRAL_CUTOFF).integrate(|x| 1.0 / (self.alpha(x) - a0)).value
        };
        if integral <= 1.0 {
            return Err(ModelError::IntegralCondition { value: integral, cutoff: HOC_INTEGRAL_CUTOFF });
        }
        Ok(HocConditions { alpha_at_zero: a0, min_selection_gap: min_gap, integral })
    }
}

/// Which built-in family a model came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Yule { b: f64 },
    FiniteType,
    HouseOfCards(HouseOfCardsParams),
}

/// A validated branching model. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    space: TraitSpace,
    channels: Vec<Channel>,
    weight: Expr,
    moment_order: u32,
    family: Family,
    rate_bounds: Vec<f64>,
}

impl Model {
    pub fn space(&self) -> TraitSpace {
        self.space
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn moment_order(&self) -> u32 {
        self.moment_order
    }

    /// Weight function `V`.
    pub fn weight(&self, x: Trait) -> f64 {
        self.weight.eval(x)
    }

    pub fn weight_expr(&self) -> &Expr {
        &self.weight
    }

    /// Supremum of each channel's rate over the validation points.
    pub fn rate_bounds(&self) -> &[f64] {
        &self.rate_bounds
    }

    pub fn max_offspring(&self) -> usize {
        self.channels.iter().map(Channel::max_offspring).max().unwrap_or(0)
    }

    pub fn types(&self) -> Option<usize> {
        match self.space {
            TraitSpace::Finite { types } => Some(types),
            TraitSpace::UnitInterval => None,
        }
    }

    pub fn with_weight(mut self, weight: Expr) -> Result<Self, ModelError> {
        self.weight = weight;
        self.validate()?;
        Ok(self)
    }

    pub fn with_moment_order(mut self, kappa: u32) -> Result<Self, ModelError> {
        self.moment_order = kappa;
        self.validate()?;
        Ok(self)
    }

    /// Mean generator matrix of a finite-type model,
    /// `A_ij = sum_c r_c(i) (m_c(i) K_c(i, j) - delta_ij)`.
    pub fn mean_matrix(&self) -> Option<Vec<Vec<f64>>> {
        let d = self.types()?;
        let mut a = vec![vec![0.0; d]; d];
        for ch in &self.channels {
            for (i, row) in a.iter_mut().enumerate() {
                let x = i as f64;
                let r = ch.rate.at(x);
                let (m1, _) = ch.law.factorial_moments(x);
                row[i] -= r;
                match &ch.placement {
                    Placement::Local => row[i] += r * m1,
                    Placement::Kernel(k) => {
                        for (j, kij) in k[i].iter().enumerate() {
                            row[j] += r * m1 * kij;
                        }
                    }
                    Placement::UniformImmigration => unreachable!("rejected on finite spaces"),
                }
            }
        }
        Some(a)
    }

    fn new(space: TraitSpace, channels: Vec<Channel>, family: Family) -> Result<Self, ModelError> {
        let mut model = Self {
            space,
            channels,
            weight: Expr::constant(1.0),
            moment_order: 4,
            family,
            rate_bounds: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&mut self) -> Result<(), ModelError> {
        if self.moment_order < 4 {
            return Err(ModelError::MomentOrder(self.moment_order));
        }
        let points = self.space.validation_points();
        for &x in &points {
            let v = self.weight(x);
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::BadWeight { at: x, value: v });
            }
        }
        let mut bounds = Vec::with_capacity(self.channels.len());
        let mut buf = Vec::new();
        for ch in &self.channels {
            match (&ch.placement, self.space) {
                (Placement::UniformImmigration, TraitSpace::Finite { .. }) => {
                    return Err(ModelError::Invalid("uniform immigration needs the unit interval".into()))
                }
                (Placement::Kernel(_), TraitSpace::UnitInterval) => {
                    return Err(ModelError::Invalid("type kernels need a finite trait space".into()))
                }
                (Placement::Kernel(k), TraitSpace::Finite { types }) => check_kernel(k, types)?,
                _ => {}
            }
            if let (Rate::PerType(r), TraitSpace::Finite { types }) = (&ch.rate, self.space) {
                if r.len() != types {
                    return Err(ModelError::Dimension(format!("{} rates for {types} types", r.len())));
                }
            }
            if let (OffspringLaw::PerType(p), TraitSpace::Finite { types }) = (&ch.law, self.space) {
                if p.len() != types {
                    return Err(ModelError::Dimension(format!("{} offspring laws for {types} types", p.len())));
                }
            }
            let mut bound = 0.0f64;
            for &x in &points {
                let r = ch.rate.at(x);
                if !(r.is_finite() && r >= 0.0) {
                    return Err(ModelError::BadRate { at: x, value: r });
                }
                bound = bound.max(r);
                ch.law.probabilities(x, &mut buf);
                check_probabilities(&buf, x)?;
            }
            bounds.push(bound);
        }
        self.rate_bounds = bounds;
        Ok(())
    }
}

fn check_probabilities(p: &[f64], at: f64) -> Result<(), ModelError> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > PROBABILITY_TOL || min < 0.0 || !sum.is_finite() {
        return Err(ModelError::BadOffspringLaw { at, sum, min });
    }
    Ok(())
}

fn check_kernel(k: &[Vec<f64>], types: usize) -> Result<(), ModelError> {
    if k.len() != types || k.iter().any(|row| row.len() != types) {
        return Err(ModelError::Dimension(format!("type kernel must be {types}x{types}")));
    }
    for (row, values) in k.iter().enumerate() {
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_TOL || values.iter().any(|v| *v < 0.0) {
            return Err(ModelError::NonStochasticKernel { row, sum });
        }
    }
    Ok(())
}

/// Single-type binary fission at rate `b`.
pub fn make_yule(b: f64) -> Result<Model, ModelError> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(ModelError::NonPositiveRate(b));
    }
    let channel = Channel {
        name: "fission".into(),
        rate: Rate::Constant(b),
        law: OffspringLaw::Fixed(vec![0.0, 0.0, 1.0]),
        placement: Placement::Local,
    };
    Model::new(TraitSpace::Finite { types: 1 }, vec![channel], Family::Yule { b })
}

/// One event channel of a finite-type model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteChannel {
    #[serde(default)]
    pub name: String,
    pub rates: Vec<f64>,
    /// One probability vector per type, or a single vector shared by all types.
    pub offspring: Vec<Vec<f64>>,
    /// Stochastic matrix for children's types; `None` means children keep the parent type.
    #[serde(default)]
    pub kernel: Option<Vec<Vec<f64>>>,
}

/// Multitype model with a single channel whose children draw types from `type_kernel`.
pub fn make_finite_type(
    rates: Vec<f64>,
    offspring_laws: Vec<Vec<f64>>,
    type_kernel: Vec<Vec<f64>>,
) -> Result<Model, ModelError> {
    make_finite_type_channels(vec![FiniteChannel {
        name: "branch".into(),
        rates,
        offspring: offspring_laws,
        kernel: Some(type_kernel),
    }])
}

/// Multitype model with several independent channels.
pub fn make_finite_type_channels(channels: Vec<FiniteChannel>) -> Result<Model, ModelError> {
    let d = channels
        .first()
        .map(|c| c.rates.len())
        .ok_or_else(|| ModelError::Invalid("at least one channel required".into()))?;
    if d == 0 {
        return Err(ModelError::Dimension("no types".into()));
    }
    let mut built = Vec::with_capacity(channels.len());
    for (idx, ch) in channels.into_iter().enumerate() {
        if ch.rates.len() != d {
            return Err(ModelError::Dimension(format!("channel {idx} has {} rates, expected {d}", ch.rates.len())));
        }
        let law = match ch.offspring.len() {
            1 => OffspringLaw::Fixed(ch.offspring[0].clone()),
            n if n == d => OffspringLaw::PerType(ch.offspring),
            n => return Err(ModelError::Dimension(format!("channel {idx} has {n} offspring laws for {d} types"))),
        };
        if let OffspringLaw::PerType(ps) = &law {
            if ps.iter().any(|p| p.is_empty()) {
                return Err(ModelError::Dimension("empty offspring law".into()));
            }
        }
        let placement = match ch.kernel {
            None => Placement::Local,
            Some(k) => {
                check_kernel(&k, d)?;
                if is_identity(&k) {
                    Placement::Local
                } else {
                    Placement::Kernel(k)
                }
            }
        };
        let name = if ch.name.is_empty() { format!("channel{idx}") } else { ch.name };
        built.push(Channel { name, rate: Rate::PerType(ch.rates), law, placement });
    }
    Model::new(TraitSpace::Finite { types: d }, built, Family::FiniteType)
}

fn is_identity(k: &[Vec<f64>]) -> bool {
    k.iter().enumerate().all(|(i, row)| row.iter().enumerate().all(|(j, &v)| v == if i == j { 1.0 } else { 0.0 }))
}

/// House-of-cards model: a local channel realizing `alpha` plus a rate-1
/// immigration channel adding one Uniform[0,1] child while the parent survives.
pub fn make_house_of_cards(params: HouseOfCardsParams) -> Result<Model, ModelError> {
    params.check()?;
    let local = match &params.realization {
        Realization::Minimal => Channel {
            name: "selection".into(),
            rate: Rate::AbsOf(params.alpha.clone()),
            law: OffspringLaw::DeathOrBinary(params.alpha.clone()),
            placement: Placement::Local,
        },
        Realization::Explicit { rate, offspring } => Channel {
            name: "selection".into(),
            rate: Rate::Function(rate.clone()),
            law: OffspringLaw::Function(offspring.clone()),
            placement: Placement::Local,
        },
    };
    let immigration = Channel {
        name: "mutation".into(),
        rate: Rate::Constant(1.0),
        law: OffspringLaw::Fixed(vec![0.0, 1.0]),
        placement: Placement::UniformImmigration,
    };
    Model::new(TraitSpace::UnitInterval, vec![local, immigration], Family::HouseOfCards(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_type_swap() -> Model {
        make_finite_type_channels(vec![
            FiniteChannel {
                name: "fission".into(),
                rates: vec![1.0, 2.0],
                offspring: vec![vec![0.0, 0.0, 1.0]],
                kernel: None,
            },
            FiniteChannel {
                name: "mutation".into(),
                rates: vec![0.1, 0.1],
                offspring: vec![vec![0.0, 1.0]],
                kernel: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            },
        ])
        .unwrap()
    }

    #[test]
    fn yule_definition() {
        let m = make_yule(1.0).unwrap();
        assert_eq!(m.channels().len(), 1);
        assert_eq!(m.rate_bounds(), &[1.0]);
        assert_eq!(m.channels()[0].law.factorial_moments(0.0), (2.0, 2.0));
        assert_eq!(m.mean_matrix().unwrap(), vec![vec![1.0]]);
        assert!(matches!(make_yule(0.0), Err(ModelError::NonPositiveRate(_))));
        assert!(make_yule(-1.0).is_err());
        assert!(make_yule(f64::NAN).is_err());
    }

    #[test]
    fn single_type_finite_matches_yule_generator() {
        let m = make_finite_type(vec![1.0], vec![vec![0.0, 0.0, 1.0]], vec![vec![1.0]]).unwrap();
        let y = make_yule(1.0).unwrap();
        assert_eq!(m.mean_matrix(), y.mean_matrix());
        assert_eq!(m.channels()[0].placement, Placement::Local);
    }

    #[test]
    fn two_type_mean_matrix() {
        let a = two_type_swap().mean_matrix().unwrap();
        let expected = [[0.9, 0.1], [0.1, 1.9]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((a[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn finite_type_rejections() {
        let err = make_finite_type(vec![1.0, 1.0], vec![vec![0.0, 0.0, 1.0]], vec![vec![0.9, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(err, Err(ModelError::NonStochasticKernel { row: 0, .. })));
        let err = make_finite_type(vec![1.0, 1.0], vec![vec![0.0, 0.0, 1.0]], vec![vec![1.0]]);
        assert!(matches!(err, Err(ModelError::Dimension(_))));
        let err = make_finite_type(vec![1.0], vec![vec![0.5, 0.4]], vec![vec![1.0]]);
        assert!(matches!(err, Err(ModelError::BadOffspringLaw { .. })));
        let err = make_finite_type(vec![-1.0], vec![vec![0.0, 0.0, 1.0]], vec![vec![1.0]]);
        assert!(matches!(err, Err(ModelError::BadRate { .. })));
    }

    #[test]
    fn hoc_identity_alpha_is_valid() {
        let params = HouseOfCardsParams::new("x").unwrap();
        let c = params.check().unwrap();
        assert_eq!(c.alpha_at_zero, 0.0);
        // Truncated integral of 1/x is ln(1e8).
        assert!((c.integral - 1e8f64.ln()).abs() < 1e-8);
        let m = make_house_of_cards(params).unwrap();
        assert_eq!(m.channels().len(), 2);
        // Rate vanishes at x = 0.
        assert_eq!(m.channels()[0].rate.at(0.0), 0.0);
        assert!((m.rate_bounds()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hoc_explicit_pure_death_realization() {
        let params = HouseOfCardsParams {
            alpha: Expr::parse("x").unwrap(),
            realization: Realization::Explicit {
                rate: Expr::parse("x").unwrap(),
                offspring: vec![Expr::parse("1").unwrap()],
            },
        };
        make_house_of_cards(params).unwrap();
        let bad = HouseOfCardsParams {
            alpha: Expr::parse("x").unwrap(),
            realization: Realization::Explicit {
                rate: Expr::parse("2*x").unwrap(),
                offspring: vec![Expr::parse("1").unwrap()],
            },
        };
        assert!(matches!(make_house_of_cards(bad), Err(ModelError::RealizationMismatch { .. })));
    }

    #[test]
    fn hoc_constant_alpha_is_valid() {
        let params = HouseOfCardsParams::new("0.3").unwrap();
        let c = params.check().unwrap();
        assert!(c.integral.is_infinite());
        make_house_of_cards(params).unwrap();
    }

    #[test]
    fn hoc_conditions_rejected_with_values() {
        // alpha decreasing: alpha(x) < alpha(0).
        let err = make_house_of_cards(HouseOfCardsParams::new("-x").unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::SelectionCondition { .. }));
        // alpha(x) - alpha(0) = 5 + x: integral ln(6/5) < 1.
        let err = make_house_of_cards(HouseOfCardsParams::new("piecewise(0, 1e-12, 5 + x)").unwrap()).unwrap_err();
        match err {
            ModelError::IntegralCondition { value, .. } => assert!((value - (6.0f64 / 5.0).ln()).abs() < 1e-6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn offspring_never_exceeds_max() {
        let laws = [
            OffspringLaw::Fixed(vec![0.2, 0.3, 0.1, 0.4]),
            OffspringLaw::Function(vec![
                Expr::parse("x/2").unwrap(),
                Expr::parse("1 - x").unwrap(),
                Expr::parse("x/2").unwrap(),
            ]),
            OffspringLaw::DeathOrBinary(Expr::parse("x - 0.5").unwrap()),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for law in &laws {
            let max = law.max_offspring();
            for i in 0..100_000 {
                let x = (i % 1000) as f64 / 999.0;
                assert!(law.sample(x, &mut rng) <= max);
            }
        }
    }

    #[test]
    fn offspring_frequencies_match_law() {
        let law = OffspringLaw::Fixed(vec![0.2, 0.3, 0.1, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[law.sample(0.0, &mut rng)] += 1;
        }
        for (k, &p) in [0.2, 0.3, 0.1, 0.4].iter().enumerate() {
            let freq = counts[k] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "k={k} freq={freq}");
        }
    }

    #[test]
    fn weight_must_be_positive() {
        let m = make_yule(1.0).unwrap();
        assert!(m.clone().with_weight(Expr::parse("0").unwrap()).is_err());
        assert!(m.clone().with_moment_order(3).is_err());
        assert!(m.with_weight(Expr::parse("2").unwrap()).is_ok());
    }
}
