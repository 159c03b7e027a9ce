//! Exact event-driven simulation of the particle system.
//!
//! Event times come from uniformization: every particle carries, per
//! channel, a clock of rate `B_c >= sup r_c`; a candidate event picks a
//! uniform particle and a channel with probability `B_c / sum B`, and fires
//! with probability `r_c(x) / B_c`. Thinning a Poisson clock this way gives
//! exactly the law of independent exponential clocks of rates `r_c(x)`.
//! If a newborn's rate exceeds its channel bound the bound is raised, which
//! is exact because the thinned clocks are memoryless.
//!
//! Population bookkeeping is slot based: on an event the parent's slot is
//! overwritten by its first child (or removed by `swap_remove` when no
//! children are produced) and remaining children are appended. Replaying an
//! event log with the same rule reproduces the slot order, so sums over
//! the alive set are bit-identical between a live run and a replay.
//!
//! Observation semantics: `Z_t` counts every particle alive at `t`,
//! including those born at exactly `t`; an event at a grid time is applied
//! before the observation.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::model::{Model, Placement, Rate, Trait};
use crate::rng::StreamSeed;

pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("horizon must be nonnegative and finite, got {0}")]
    BadHorizon(f64),
    #[error("population cap must be at least 1")]
    BadCap,
    #[error("initial trait {0} is outside the trait space")]
    BadInitialTrait(f64),
    #[error("observation time {t} is beyond the simulated horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("observation time {t} is after the truncation time {truncated_at}")]
    AfterTruncation { t: f64, truncated_at: f64 },
    #[error("observation grid must be nonempty, nonnegative and strictly increasing")]
    BadGrid,
    #[error("expected population e^(lambda*T) = {expected:.3e} at horizon {horizon} exceeds the cap {cap}; lower the horizon or raise the cap")]
    HorizonInfeasible { expected: f64, horizon: f64, cap: usize },
    #[error("all {0} replicas hit the population cap; lower the horizon")]
    AllTruncated(usize),
    #[error("need at least one replica")]
    NoReplicas,
}

/// A named real function of the trait.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: Arc<dyn Fn(Trait) -> f64 + Send + Sync>,
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(Trait) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }

    pub fn ones() -> Self {
        Self::new("one", |_| 1.0)
    }

    pub fn from_expr(name: impl Into<String>, expr: crate::expr::Expr) -> Self {
        Self::new(name, move |x| expr.eval(x))
    }

    #[inline]
    pub fn eval(&self, x: Trait) -> f64 {
        (self.f)(x)
    }
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish()
    }
}

/// One branching event: the parent is removed and `children` are born.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub parent: u64,
    pub children: Vec<Trait>,
}

/// A particle of the genealogy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub id: u64,
    pub parent: Option<u64>,
    pub trait_value: Trait,
    pub birth_time: f64,
}

/// A realized trajectory with its full event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x0: Trait,
    pub horizon: f64,
    pub seed: StreamSeed,
    pub cap: usize,
    pub events: Vec<Event>,
    pub truncated: bool,
    /// Time of the event that pushed the population past the cap.
    pub truncated_at: Option<f64>,
    pub final_population: usize,
}

impl Trajectory {
    /// Population size right after each event, starting from 1.
    pub fn population_path(&self) -> Vec<(f64, usize)> {
        let mut n = 1usize;
        let mut path = Vec::with_capacity(self.events.len() + 1);
        path.push((0.0, 1));
        for e in &self.events {
            n = n + e.children.len() - 1;
            path.push((e.time, n));
        }
        path
    }

    /// Every particle ever born, in id order. Ids are assigned sequentially
    /// in event order, children of an event in listed order.
    pub fn genealogy(&self) -> Vec<Particle> {
        let mut out = vec![Particle { id: 0, parent: None, trait_value: self.x0, birth_time: 0.0 }];
        for e in &self.events {
            for &c in &e.children {
                out.push(Particle { id: out.len() as u64, parent: Some(e.parent), trait_value: c, birth_time: e.time });
            }
        }
        out
    }

    /// Tab-separated dump: `time, parent_id, n_children, child traits...`, one event per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# time\tparent_id\tn_children\tchild_traits")?;
        for e in &self.events {
            write!(w, "{:?}\t{}\t{}", e.time, e.parent, e.children.len())?;
            for c in &e.children {
                write!(w, "\t{c:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Alive population in slot order.
struct Population {
    channels: usize,
    functions: usize,
    traits: Vec<Trait>,
    rates: Vec<f64>,
    fvals: Vec<f64>,
    ids: Option<Vec<u64>>,
    next_id: u64,
}

impl Population {
    fn len(&self) -> usize {
        self.traits.len()
    }

    fn remove(&mut self, i: usize) {
        self.traits.swap_remove(i);
        if let Some(ids) = &mut self.ids {
            ids.swap_remove(i);
        }
        swap_remove_block(&mut self.rates, i, self.channels);
        swap_remove_block(&mut self.fvals, i, self.functions);
    }

    fn sums(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.functions == 0 {
            return;
        }
        for row in self.fvals.chunks_exact(self.functions) {
            for (acc, v) in out.iter_mut().zip(row) {
                *acc += *v;
            }
        }
    }
}

fn swap_remove_block(v: &mut Vec<f64>, i: usize, width: usize) {
    if width == 0 {
        return;
    }
    let last = v.len() / width - 1;
    if i != last {
        let (head, tail) = v.split_at_mut(last * width);
        head[i * width..(i + 1) * width].copy_from_slice(&tail[..width]);
    }
    v.truncate(last * width);
}

struct Outcome {
    truncated_at: Option<f64>,
    final_population: usize,
    events: u64,
}

/// Runs one trajectory, calling `observe(k, sums)` at each of `stops`
/// (sorted, last entry is the horizon).
fn run<R: Rng>(
    model: &Model,
    x0: Trait,
    stops: &[f64],
    cap: usize,
    rng: &mut R,
    functions: &[TestFunction],
    mut log: Option<&mut Vec<Event>>,
    mut observe: impl FnMut(usize, &[f64]),
) -> Outcome {
    let channels = model.channels();
    let nc = channels.len();
    let nf = functions.len();
    let mut bounds: Vec<f64> = model.rate_bounds().to_vec();
    // A constant-rate channel at its bound never rejects.
    let exact: Vec<bool> = channels.iter().map(|c| matches!(c.rate, Rate::Constant(_))).collect();
    let mut pop = Population {
        channels: nc,
        functions: nf,
        traits: Vec::new(),
        rates: Vec::new(),
        fvals: Vec::new(),
        ids: log.as_ref().map(|_| Vec::new()),
        next_id: 0,
    };
    let birth = |pop: &mut Population, bounds: &mut [f64], x: Trait, slot: Option<usize>| {
        let id = pop.next_id;
        pop.next_id += 1;
        match slot {
            Some(i) => {
                pop.traits[i] = x;
                for (c, ch) in channels.iter().enumerate() {
                    let r = ch.rate.at(x);
                    bounds[c] = bounds[c].max(r);
                    pop.rates[i * nc + c] = r;
                }
                for (k, f) in functions.iter().enumerate() {
                    pop.fvals[i * nf + k] = f.eval(x);
                }
                if let Some(ids) = &mut pop.ids {
                    ids[i] = id;
                }
            }
            None => {
                pop.traits.push(x);
                for (c, ch) in channels.iter().enumerate() {
                    let r = ch.rate.at(x);
                    bounds[c] = bounds[c].max(r);
                    pop.rates.push(r);
                }
                for f in functions {
                    pop.fvals.push(f.eval(x));
                }
                if let Some(ids) = &mut pop.ids {
                    ids.push(id);
                }
            }
        }
    };
    // Appends a copy of slot `i` under a fresh id; used for local children.
    let clone_slot = |pop: &mut Population, i: usize| {
        let id = pop.next_id;
        pop.next_id += 1;
        let x = pop.traits[i];
        pop.traits.push(x);
        pop.rates.extend_from_within(i * nc..(i + 1) * nc);
        pop.fvals.extend_from_within(i * nf..(i + 1) * nf);
        if let Some(ids) = &mut pop.ids {
            ids.push(id);
        }
    };
    let relabel = |pop: &mut Population, i: usize| {
        let id = pop.next_id;
        pop.next_id += 1;
        if let Some(ids) = &mut pop.ids {
            ids[i] = id;
        }
    };

    birth(&mut pop, &mut bounds, x0, None);
    let mut sums = vec![0.0; nf];
    let mut t = 0.0f64;
    let mut next_stop = 0usize;
    let mut events = 0u64;
    let mut children: Vec<Trait> = Vec::new();
    let mut row_buf: Vec<f64> = Vec::new();

    loop {
        let n = pop.len();
        let bound_sum: f64 = bounds.iter().sum();
        let next_time = if n == 0 || bound_sum <= 0.0 {
            f64::INFINITY
        } else {
            let e: f64 = rng.sample(Exp1);
            t + e / (n as f64 * bound_sum)
        };
        while next_stop < stops.len() && stops[next_stop] < next_time {
            pop.sums(&mut sums);
            observe(next_stop, &sums);
            next_stop += 1;
        }
        if next_stop == stops.len() {
            break;
        }
        t = next_time;

        let i = if n == 1 { 0 } else { rng.random_range(0..n) };
        let c = if nc == 1 && exact[0] {
            0
        } else {
            let u: f64 = rng.random::<f64>() * bound_sum;
            let mut acc = 0.0;
            let mut chosen = None;
            for (c, &b) in bounds.iter().enumerate() {
                if u < acc + b {
                    let fired = exact[c] || (u - acc) < pop.rates[i * nc + c];
                    chosen = if fired { Some(c) } else { None };
                    break;
                }
                acc += b;
            }
            match chosen {
                Some(c) => c,
                None => continue,
            }
        };

        let channel = &channels[c];
        let x = pop.traits[i];
        let k = channel.law.sample(x, rng);
        events += 1;
        let parent_id = pop.ids.as_ref().map(|ids| ids[i]);

        match &channel.placement {
            Placement::Local => {
                if k == 0 {
                    pop.remove(i);
                } else {
                    relabel(&mut pop, i);
                    for _ in 1..k {
                        clone_slot(&mut pop, i);
                    }
                }
                if let Some(log) = log.as_deref_mut() {
                    log.push(Event { time: t, parent: parent_id.unwrap(), children: vec![x; k] });
                }
            }
            Placement::Kernel(kernel) => {
                children.clear();
                row_buf.clear();
                row_buf.extend_from_slice(&kernel[x as usize]);
                for _ in 0..k {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut ty = row_buf.len() - 1;
                    for (j, &p) in row_buf.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            ty = j;
                            break;
                        }
                    }
                    children.push(ty as f64);
                }
                if k == 0 {
                    pop.remove(i);
                } else {
                    birth(&mut pop, &mut bounds, children[0], Some(i));
                    for &child in &children[1..] {
                        birth(&mut pop, &mut bounds, child, None);
                    }
                }
                if let Some(log) = log.as_deref_mut() {
                    log.push(Event { time: t, parent: parent_id.unwrap(), children: children.clone() });
                }
            }
            Placement::UniformImmigration => {
                // The surviving parent is recorded as its own first child.
                relabel(&mut pop, i);
                children.clear();
                children.push(x);
                for _ in 0..k {
                    let y: f64 = rng.random();
                    children.push(y);
                    birth(&mut pop, &mut bounds, y, None);
                }
                if let Some(log) = log.as_deref_mut() {
                    log.push(Event { time: t, parent: parent_id.unwrap(), children: children.clone() });
                }
            }
        }

        if pop.len() > cap {
            return Outcome { truncated_at: Some(t), final_population: pop.len(), events };
        }
    }
    Outcome { truncated_at: None, final_population: pop.len(), events }
}

/// Simulates one trajectory up to `horizon`, keeping the event log.
pub fn simulate_trajectory(
    model: &Model,
    x0: Trait,
    horizon: f64,
    seed: StreamSeed,
    cap: usize,
) -> Result<Trajectory, SimulationError> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(SimulationError::BadHorizon(horizon));
    }
    if cap == 0 {
        return Err(SimulationError::BadCap);
    }
    if !model.space().contains(x0) {
        return Err(SimulationError::BadInitialTrait(x0));
    }
    let mut rng = seed.rng();
    let mut events = Vec::new();
    let outcome = run(model, x0, &[horizon], cap, &mut rng, &[], Some(&mut events), |_, _| {});
    Ok(Trajectory {
        x0,
        horizon,
        seed,
        cap,
        events,
        truncated: outcome.truncated_at.is_some(),
        truncated_at: outcome.truncated_at,
        final_population: outcome.final_population,
    })
}

/// `Z_t(f)`: sum of `f` over the particles alive at `t`, replayed from the event log.
pub fn observe(trajectory: &Trajectory, t: f64, f: &TestFunction) -> Result<f64, SimulationError> {
    Ok(alive_traits(trajectory, t)?.iter().map(|&x| f.eval(x)).sum())
}

/// Traits of the particles alive at `t`, in slot order.
pub fn alive_traits(trajectory: &Trajectory, t: f64) -> Result<Vec<Trait>, SimulationError> {
    if !(t >= 0.0) || t > trajectory.horizon {
        return Err(SimulationError::BeyondHorizon { t, horizon: trajectory.horizon });
    }
    if let Some(tt) = trajectory.truncated_at {
        if t >= tt {
            return Err(SimulationError::AfterTruncation { t, truncated_at: tt });
        }
    }
    let mut traits = vec![trajectory.x0];
    let mut ids = vec![0u64];
    // slot_of[id] = current slot of that particle.
    let mut slot_of: Vec<usize> = vec![0];
    for e in trajectory.events.iter().take_while(|e| e.time <= t) {
        let i = slot_of[e.parent as usize];
        if e.children.is_empty() {
            traits.swap_remove(i);
            ids.swap_remove(i);
            if i < ids.len() {
                slot_of[ids[i] as usize] = i;
            }
            continue;
        }
        for (j, &c) in e.children.iter().enumerate() {
            let id = slot_of.len() as u64;
            if j == 0 {
                traits[i] = c;
                ids[i] = id;
                slot_of.push(i);
            } else {
                slot_of.push(traits.len());
                traits.push(c);
                ids.push(id);
            }
        }
    }
    Ok(traits)
}

/// How replicas are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon worker pool; runs sequentially when built without the `parallel` feature.
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub x0: Trait,
    /// Observation times, strictly increasing.
    pub grid: Vec<f64>,
    /// Extra time after the last grid point; the extension horizon is `max(grid) + extension`.
    pub extension: f64,
    pub replicas: usize,
    pub master_seed: u64,
    pub cap: usize,
    /// Malthusian rate, if known, for the horizon feasibility check.
    pub growth_rate: Option<f64>,
}

impl EnsembleSpec {
    pub fn horizon(&self) -> f64 {
        self.grid.last().copied().unwrap_or(0.0) + self.extension
    }

    /// Grid times followed by the extension horizon (when `extension > 0`).
    pub fn observation_times(&self) -> Vec<f64> {
        let mut times = self.grid.clone();
        if self.extension > 0.0 {
            times.push(self.horizon());
        }
        times
    }
}

/// Replicated observations `Z_t(f)` on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub spec: EnsembleSpec,
    pub times: Vec<f64>,
    pub function_names: Vec<String>,
    /// `values[(r * times.len() + t) * functions + f]`.
    values: Vec<f64>,
    pub truncated: Vec<bool>,
    pub events: Vec<u64>,
}

impl Ensemble {
    pub fn replicas(&self) -> usize {
        self.truncated.len()
    }

    pub fn truncation_count(&self) -> usize {
        self.truncated.iter().filter(|t| **t).count()
    }

    pub fn truncation_fraction(&self) -> f64 {
        self.truncation_count() as f64 / self.replicas() as f64
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.function_names.iter().position(|n| n == name)
    }

    /// Index of observation time `t` (exact match within 1e-12).
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }

    pub fn value(&self, replica: usize, time: usize, function: usize) -> f64 {
        let nt = self.times.len();
        let nf = self.function_names.len();
        self.values[(replica * nt + time) * nf + function]
    }

    /// Values over the non-truncated replicas, in replica order.
    pub fn column(&self, time: usize, function: usize) -> Vec<f64> {
        (0..self.replicas()).filter(|&r| !self.truncated[r]).map(|r| self.value(r, time, function)).collect()
    }

    /// Indices of the non-truncated replicas.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.replicas()).filter(|&r| !self.truncated[r]).collect()
    }
}

struct ReplicaResult {
    values: Vec<f64>,
    truncated: bool,
    events: u64,
}

fn run_replica(model: &Model, spec: &EnsembleSpec, stops: &[f64], functions: &[TestFunction], r: usize) -> ReplicaResult {
    let mut rng = StreamSeed::replica(spec.master_seed, r).rng();
    let nf = functions.len();
    let mut values = vec![f64::NAN; stops.len() * nf];
    let outcome = run(model, spec.x0, stops, spec.cap, &mut rng, functions, None, |k, sums| {
        values[k * nf..(k + 1) * nf].copy_from_slice(sums);
    });
    ReplicaResult { values, truncated: outcome.truncated_at.is_some(), events: outcome.events }
}

/// Simulates `spec.replicas` independent trajectories from `spec.x0` and
/// records `Z_t(f)` on the grid and at the extension horizon.
///
/// Replica `r` uses stream `StreamSeed::replica(master_seed, r)`, so the
/// output does not depend on the execution mode or worker count.
pub fn simulate_ensemble(
    model: &Model,
    spec: &EnsembleSpec,
    functions: &[TestFunction],
    execution: Execution,
) -> Result<Ensemble, SimulationError> {
    if spec.replicas == 0 {
        return Err(SimulationError::NoReplicas);
    }
    if spec.cap == 0 {
        return Err(SimulationError::BadCap);
    }
    if spec.grid.is_empty() || spec.grid[0] < 0.0 || spec.grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimulationError::BadGrid);
    }
    if !(spec.extension >= 0.0 && spec.extension.is_finite()) {
        return Err(SimulationError::BadHorizon(spec.extension));
    }
    if !model.space().contains(spec.x0) {
        return Err(SimulationError::BadInitialTrait(spec.x0));
    }
    let horizon = spec.horizon();
    if let Some(lambda) = spec.growth_rate {
        let expected = (lambda * horizon).exp();
        if expected > spec.cap as f64 {
            return Err(SimulationError::HorizonInfeasible { expected, horizon, cap: spec.cap });
        }
    }
    let stops = spec.observation_times();
    let results: Vec<ReplicaResult> = match execution {
        Execution::Sequential => (0..spec.replicas).map(|r| run_replica(model, spec, &stops, functions, r)).collect(),
        Execution::Parallel => parallel_replicas(model, spec, &stops, functions),
    };
    let mut values = Vec::with_capacity(spec.replicas * stops.len() * functions.len());
    let mut truncated = Vec::with_capacity(spec.replicas);
    let mut events = Vec::with_capacity(spec.replicas);
    for r in results {
        values.extend_from_slice(&r.values);
        truncated.push(r.truncated);
        events.push(r.events);
    }
    let ensemble = Ensemble {
        spec: spec.clone(),
        times: stops,
        function_names: functions.iter().map(|f| f.name.clone()).collect(),
        values,
        truncated,
        events,
    };
    if ensemble.truncation_count() == ensemble.replicas() {
        return Err(SimulationError::AllTruncated(ensemble.replicas()));
    }
    Ok(ensemble)
}

#[cfg(feature = "parallel")]
fn parallel_replicas(model: &Model, spec: &EnsembleSpec, stops: &[f64], functions: &[TestFunction]) -> Vec<ReplicaResult> {
    use rayon::prelude::*;
    (0..spec.replicas).into_par_iter().map(|r| run_replica(model, spec, stops, functions, r)).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_replicas(model: &Model, spec: &EnsembleSpec, stops: &[f64], functions: &[TestFunction]) -> Vec<ReplicaResult> {
    (0..spec.replicas).map(|r| run_replica(model, spec, stops, functions, r)).collect()
}
