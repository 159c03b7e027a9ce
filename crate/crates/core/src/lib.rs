//! Simulation and numerical verification toolkit for supercritical
//! branching Markov processes.
//!
//! - [`model`]: trait spaces, branching channels, built-in families
//!   (Yule, finite-type, house of cards).
//! - [`simulator`]: exact event-driven trajectories and replica ensembles.
//! - [`semigroup`]: eigen-triplet `(lambda, h, gamma)`, spectral gap and
//!   deterministic first/second moment oracles.
//! - [`fluctuations`]: martingale limit, fluctuation samples, limiting
//!   variances, test-function distance and rate fits.
//!
//! Ensembles run on a rayon pool with the default `parallel` feature and
//! sequentially without it; results are identical either way.

pub mod expr;
pub mod fluctuations;
pub mod model;
pub mod ode;
pub mod quadrature;
pub mod rng;
pub mod semigroup;
pub mod simulator;
pub mod stats;

pub use expr::Expr;
pub use model::{Model, ModelError};
pub use rng::StreamSeed;
pub use semigroup::{EigenTriplet, MomentSolver, Regime, RegimeKind};
pub use simulator::{Ensemble, EnsembleSpec, Execution, TestFunction, Trajectory};
