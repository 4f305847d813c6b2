//! Particle-based solver for min-max problems over probability measures
//! arising in adversarial supervised learning.
//!
//! A shallow-network learner (a weighted particle ensemble over network
//! parameters) plays against a transport-penalized adversary (a coupling
//! that moves each data point at a quadratic cost). Both players evolve by
//! projected gradient steps on particle positions and multiplicative
//! updates on particle masses; time averages of the trajectory approximate
//! Nash equilibria of the game.
//!
//! Module map:
//! - [`measures`]: weighted ensembles for both players and their
//!   conservation invariants;
//! - [`payoff`]: the closed-form game payoff, first variations, gradients;
//! - [`dynamics`]: the ascent-descent stepper and run loop;
//! - [`averaging`]: time averages in three memory regimes;
//! - [`eval`]: Nash-gap estimation and PGD robustness evaluation;
//! - [`ot`]: empirical 1-Wasserstein distances for convergence studies;
//! - [`data`]: synthetic datasets, CSV ingestion, seeded initializers.

pub mod averaging;
pub mod data;
pub mod dynamics;
pub mod eval;
pub mod measures;
pub mod numerics;
pub mod ot;
pub mod payoff;
pub mod seed;

pub use averaging::{AveragedMeasures, Averager, AveragerKind};
pub use data::{Dataset, InitSpec, Nu0Spec, Pi0Spec};
pub use dynamics::{run, step, RunTrace, SolverConfig, SolverState, StepSchedule};
pub use eval::{nash_gap, NashGapOpts, NashGapReport, PgdConfig};
pub use measures::{BoxDomain, CouplingMeasure, ParamMeasure};
pub use payoff::{Activation, AttackTarget, Loss, PayoffModel};
