//! The ascent-descent stepper: a synchronous particle update that moves
//! attack particles up their payoff gradient and parameter particles down
//! theirs, with multiplicative weight updates renormalized so each attack
//! group keeps its initial mass and the parameter ensemble keeps mass one.
//!
//! One solver step with step size `s` reads, per attack particle,
//!
//! ```text
//! z~  <- P_Z(z~ + s grad u_pi)        omega <- omega exp(s kappa u_pi)   (renormalized per group)
//! th  <- P_Th(th - (eta/K) grad u_nu) alpha <- alpha exp(-(eta/K) kappa u_nu) (renormalized)
//! ```
//!
//! with every right-hand side evaluated at the time-t measures. In the
//! strongly-concave regime the ascent uses a fixed `dt` instead of the
//! schedule and runs `K` sub-steps per descent step, which slows the
//! learner down relative to the adversary by a factor of `K`.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::averaging::{Averager, AveragingError};
use crate::measures::{mass_residuals, CouplingMeasure, MeasureError, ParamMeasure};
use crate::numerics::{ksum, Kahan};
use crate::payoff::{PayoffError, PayoffModel, RiskCache};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Payoff(#[from] PayoffError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error("non-finite {what} at step {step} (index {index})")]
    NonFinite {
        what: &'static str,
        step: u64,
        index: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Learning-rate schedule `eta_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant { eta0: f64 },
    /// `eta0 / (t + 1)`, the decay used in the reference experiments.
    InverseT { eta0: f64 },
}

impl StepSchedule {
    pub fn eta(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant { eta0 } => eta0,
            StepSchedule::InverseT { eta0 } => eta0 / (t as f64 + 1.0),
        }
    }

    pub fn eta0(&self) -> f64 {
        match *self {
            StepSchedule::Constant { eta0 } | StepSchedule::InverseT { eta0 } => eta0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub schedule: StepSchedule,
    /// Weight-update rate.
    pub kappa: f64,
    /// Ascent sub-steps per descent step (K). The descent step size is
    /// `eta_t / K` so that K > 1 slows the learner down.
    pub inner_repeats: usize,
    /// When false (strongly-concave regime) the ascent uses `ascent_dt`
    /// instead of the schedule.
    pub ascent_uses_eta: bool,
    pub ascent_dt: f64,
    pub max_steps: u64,
    /// Trace/averaging cadence; 0 records only the initial and final states.
    pub checkpoint_every: u64,
    /// Full measure snapshot cadence; 0 keeps only the initial and final
    /// snapshots.
    pub snapshot_every: u64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::InverseT { eta0: 0.1 },
            kappa: 0.25,
            inner_repeats: 1,
            ascent_uses_eta: true,
            ascent_dt: 0.05,
            max_steps: 1000,
            checkpoint_every: 10,
            snapshot_every: 100,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), MeasureError> {
        assert!(self.kappa > 0.0, "kappa must be positive");
        assert!(self.inner_repeats >= 1, "inner_repeats must be at least 1");
        assert!(self.schedule.eta0() > 0.0, "eta0 must be positive");
        assert!(self.ascent_dt > 0.0, "ascent_dt must be positive");
        Ok(())
    }
}

/// Mutable solver state; exclusively owned by the stepping loop. Checkpoints
/// hand out immutable clones.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub t: u64,
    /// Total ascent sub-steps taken (advances K times per step in the
    /// strongly-concave regime).
    pub ascent_steps: u64,
    pub pi: CouplingMeasure,
    pub nu: ParamMeasure,
}

impl SolverState {
    pub fn new(pi: CouplingMeasure, nu: ParamMeasure) -> Self {
        Self {
            t: 0,
            ascent_steps: 0,
            pi,
            nu,
        }
    }
}

/// One ascent pass over all attack particles: position and weight updates
/// computed from the current measures, then per-group renormalization back
/// to the frozen group mass. The exponential weights are centered by the
/// group maximum before exponentiation; the renormalization cancels the
/// constant factor, so this matches the uncentered update exactly while
/// staying overflow-safe.
fn ascent_block(
    pi: &mut CouplingMeasure,
    nu: &ParamMeasure,
    model: &PayoffModel,
    s: f64,
    kappa: f64,
    step: u64,
) -> Result<(), DynamicsError> {
    let z_box = pi.z_box.clone();
    let updates: Vec<Result<(), DynamicsError>> = pi
        .groups
        .par_iter_mut()
        .enumerate()
        .map(|(gi, group)| {
            let mut exponents = Vec::with_capacity(group.attacks.len());
            let anchor = group.anchor().to_vec();
            for attack in group.attacks.iter_mut() {
                let (u, grad) = model.u_and_grad_u_pi(nu, &anchor, &attack.z)?;
                for (zi, gi_) in attack.z.iter_mut().zip(&grad) {
                    *zi += s * gi_;
                }
                z_box.project(&mut attack.z);
                if attack.z.iter().any(|v| !v.is_finite()) {
                    return Err(DynamicsError::NonFinite {
                        what: "attack position",
                        step,
                        index: gi,
                    });
                }
                exponents.push(s * kappa * u);
            }
            let max_e = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max_e.is_finite() {
                return Err(DynamicsError::NonFinite {
                    what: "attack weight exponent",
                    step,
                    index: gi,
                });
            }
            let mut total = Kahan::new();
            for (attack, e) in group.attacks.iter_mut().zip(&exponents) {
                attack.omega *= (e - max_e).exp();
                total.add(attack.omega);
            }
            let total = total.value();
            if !total.is_finite() || total <= 0.0 {
                return Err(DynamicsError::NonFinite {
                    what: "attack group normalization",
                    step,
                    index: gi,
                });
            }
            let scale = group.group_mass() / total;
            for attack in group.attacks.iter_mut() {
                attack.omega *= scale;
            }
            Ok(())
        })
        .collect();
    for r in updates {
        r?;
    }
    Ok(())
}

/// One descent pass over all parameter particles, evaluated against the
/// given coupling; returns the updated ensemble.
fn descent_block(
    pi: &CouplingMeasure,
    nu: &ParamMeasure,
    model: &PayoffModel,
    s: f64,
    kappa: f64,
    step: u64,
) -> Result<ParamMeasure, DynamicsError> {
    let cache = RiskCache::build(pi, nu, model)?;
    let theta_box = nu.theta_box.clone();
    let updated: Vec<Result<(crate::measures::ParamParticle, f64), DynamicsError>> = nu
        .particles
        .par_iter()
        .enumerate()
        .map(|(ki, p)| {
            let u = cache.u_nu(p.a, &p.b);
            let grad = cache.grad_u_nu(p.a, &p.b);
            let mut pos = p.position();
            for (xi, gi) in pos.iter_mut().zip(&grad) {
                *xi -= s * gi;
            }
            theta_box.project(&mut pos);
            if pos.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::NonFinite {
                    what: "parameter position",
                    step,
                    index: ki,
                });
            }
            let mut q = p.clone();
            q.set_position(&pos);
            Ok((q, -s * kappa * u))
        })
        .collect();
    let mut particles = Vec::with_capacity(nu.len());
    let mut exponents = Vec::with_capacity(nu.len());
    for r in updated {
        let (p, e) = r?;
        particles.push(p);
        exponents.push(e);
    }
    let max_e = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_e.is_finite() {
        return Err(DynamicsError::NonFinite {
            what: "parameter weight exponent",
            step,
            index: 0,
        });
    }
    let mut total = Kahan::new();
    for (p, e) in particles.iter_mut().zip(&exponents) {
        p.alpha *= (e - max_e).exp();
        total.add(p.alpha);
    }
    let total = total.value();
    if !total.is_finite() || total <= 0.0 {
        return Err(DynamicsError::NonFinite {
            what: "parameter normalization",
            step,
            index: 0,
        });
    }
    for p in particles.iter_mut() {
        p.alpha /= total;
    }
    Ok(ParamMeasure {
        particles,
        theta_box,
    })
}

/// Advance the state by one step. All right-hand sides are evaluated at the
/// time-t measures: the descent sees the coupling as it was before this
/// step's ascent sub-steps.
pub fn step(
    state: &mut SolverState,
    model: &PayoffModel,
    cfg: &SolverConfig,
) -> Result<(), DynamicsError> {
    let eta = cfg.schedule.eta(state.t);
    let k = cfg.inner_repeats.max(1);
    let s_ascent = if cfg.ascent_uses_eta { eta } else { cfg.ascent_dt };
    let new_nu = descent_block(
        &state.pi,
        &state.nu,
        model,
        eta / k as f64,
        cfg.kappa,
        state.t,
    )?;
    for _ in 0..k {
        ascent_block(&mut state.pi, &state.nu, model, s_ascent, cfg.kappa, state.t)?;
        state.ascent_steps += 1;
    }
    state.nu = new_nu;
    state.t += 1;
    Ok(())
}

/// Descent-only dynamics against a frozen coupling: the vanilla training
/// baseline. Position and weight updates are exactly the solver's descent
/// block.
pub fn run_descent_only(
    pi: &CouplingMeasure,
    nu0: ParamMeasure,
    model: &PayoffModel,
    cfg: &SolverConfig,
) -> Result<ParamMeasure, DynamicsError> {
    let mut nu = nu0;
    let k = cfg.inner_repeats.max(1);
    for t in 0..cfg.max_steps {
        let eta = cfg.schedule.eta(t);
        nu = descent_block(pi, &nu, model, eta / k as f64, cfg.kappa, t)?;
    }
    Ok(nu)
}

/// One per-checkpoint metrics row; the columns of the trace CSV.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub step: u64,
    pub payoff: f64,
    /// max of the per-group residuals and the total-mass residual of pi.
    pub mass_residual_pi: f64,
    pub mass_residual_nu: f64,
    /// Mean over groups of the attack-weight entropy.
    pub entropy_mean: f64,
    pub eta: f64,
}

/// Immutable measure snapshot recorded on the snapshot cadence.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: u64,
    pub pi: CouplingMeasure,
    pub nu: ParamMeasure,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), std::io::Error> {
        writeln!(
            w,
            "step,payoff,mass_residual_pi,mass_residual_nu,entropy_mean,eta_t"
        )?;
        for r in &self.rows {
            let mut line = String::new();
            let _ = write!(
                line,
                "{},{},{},{},{},{}",
                r.step, r.payoff, r.mass_residual_pi, r.mass_residual_nu, r.entropy_mean, r.eta
            );
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn mean_group_entropy(pi: &CouplingMeasure) -> f64 {
    let per_group: Vec<f64> = pi
        .groups
        .iter()
        .map(|g| {
            let m = g.group_mass();
            -ksum(g.attacks.iter().map(|a| {
                let q = a.omega / m;
                if q > 0.0 {
                    q * q.ln()
                } else {
                    0.0
                }
            }))
        })
        .collect();
    ksum(per_group.iter().copied()) / per_group.len() as f64
}

fn record(
    trace: &mut RunTrace,
    state: &SolverState,
    model: &PayoffModel,
    cfg: &SolverConfig,
    averager: &mut Averager,
    take_snapshot: bool,
) -> Result<(), DynamicsError> {
    let residuals = mass_residuals(&state.pi, &state.nu);
    trace.rows.push(TraceRow {
        step: state.t,
        payoff: model.payoff(&state.pi, &state.nu)?,
        mass_residual_pi: residuals.per_group_max.max(residuals.pi_total),
        mass_residual_nu: residuals.nu_total,
        entropy_mean: mean_group_entropy(&state.pi),
        eta: cfg.schedule.eta(state.t),
    });
    averager.absorb(&state.pi, &state.nu, state.t)?;
    if take_snapshot {
        trace.snapshots.push(Snapshot {
            step: state.t,
            pi: state.pi.clone(),
            nu: state.nu.clone(),
        });
    }
    Ok(())
}

/// Iterate the stepper for `cfg.max_steps`, recording metrics on the
/// checkpoint cadence and feeding every checkpoint to the averager. Returns
/// the trace and the final state.
pub fn run(
    mut state: SolverState,
    model: &PayoffModel,
    cfg: &SolverConfig,
    averager: &mut Averager,
) -> Result<(RunTrace, SolverState), DynamicsError> {
    cfg.validate()?;
    state.pi.validate()?;
    state.nu.validate()?;
    let mut trace = RunTrace::default();
    let hit = |every: u64, t: u64| -> bool {
        t == cfg.max_steps || (every > 0 && t.is_multiple_of(every))
    };
    record(
        &mut trace,
        &state,
        model,
        cfg,
        averager,
        true, // always keep the initial snapshot
    )?;
    while state.t < cfg.max_steps {
        step(&mut state, model, cfg)?;
        if hit(cfg.checkpoint_every, state.t) {
            let snap = hit(cfg.snapshot_every, state.t);
            record(&mut trace, &state, model, cfg, averager, snap)?;
        }
    }
    Ok((trace, state))
}

/// Exact continuous-time right-hand sides of the particle system, exposed
/// for integrator cross-checks. The learning-rate schedule acts as the
/// clock of the discretization, so the position velocities carry no eta
/// factor and the mass rates are centered by the corresponding conditional
/// means.
#[derive(Clone, Debug)]
pub struct OdeRhs {
    /// Per group, per attack: velocity of the attacked point.
    pub attack_velocity: Vec<Vec<Vec<f64>>>,
    /// Per group, per attack: d omega / dt.
    pub omega_rate: Vec<Vec<f64>>,
    /// Per parameter particle: velocity of theta.
    pub theta_velocity: Vec<Vec<f64>>,
    /// Per parameter particle: d alpha / dt.
    pub alpha_rate: Vec<f64>,
}

pub fn ode_rhs(
    state: &SolverState,
    model: &PayoffModel,
    cfg: &SolverConfig,
) -> Result<OdeRhs, DynamicsError> {
    let mut attack_velocity = Vec::with_capacity(state.pi.n_groups());
    let mut omega_rate = Vec::with_capacity(state.pi.n_groups());
    for g in &state.pi.groups {
        let mut vels = Vec::with_capacity(g.attacks.len());
        let mut us = Vec::with_capacity(g.attacks.len());
        for a in &g.attacks {
            let (u, grad) = model.u_and_grad_u_pi(&state.nu, g.anchor(), &a.z)?;
            vels.push(grad);
            us.push(u);
        }
        // conditional mean of u_pi given the anchor
        let mean = ksum(
            g.attacks
                .iter()
                .zip(&us)
                .map(|(a, &u)| (a.omega / g.group_mass()) * u),
        );
        let rates = g
            .attacks
            .iter()
            .zip(&us)
            .map(|(a, &u)| cfg.kappa * a.omega * (u - mean))
            .collect();
        attack_velocity.push(vels);
        omega_rate.push(rates);
    }

    let cache = RiskCache::build(&state.pi, &state.nu, model)?;
    let mut theta_velocity = Vec::with_capacity(state.nu.len());
    let mut us = Vec::with_capacity(state.nu.len());
    for p in &state.nu.particles {
        let grad = cache.grad_u_nu(p.a, &p.b);
        theta_velocity.push(grad.iter().map(|gi| -gi).collect());
        us.push(cache.u_nu(p.a, &p.b));
    }
    let mean = ksum(state.nu.particles.iter().zip(&us).map(|(p, &u)| p.alpha * u));
    let alpha_rate = state
        .nu
        .particles
        .iter()
        .zip(&us)
        .map(|(p, &u)| -cfg.kappa * p.alpha * (u - mean))
        .collect();

    Ok(OdeRhs {
        attack_velocity,
        omega_rate,
        theta_velocity,
        alpha_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::AveragerKind;
    use crate::data::{gen_regression_1d, init_state, InitSpec, Nu0Spec, Pi0Spec};
    use crate::measures::{Attack, AttackGroup, BoxDomain, ParamParticle};
    use crate::payoff::{Activation, AttackTarget, Loss};

    fn tiny_state() -> SolverState {
        let z_box = BoxDomain::default_z(1);
        let groups = vec![
            AttackGroup::new(
                vec![0.2, 0.3],
                vec![
                    Attack {
                        z: vec![0.25, 0.35],
                        omega: 0.25,
                    },
                    Attack {
                        z: vec![0.1, 0.2],
                        omega: 0.25,
                    },
                ],
                0.5,
            ),
            AttackGroup::new(
                vec![-0.4, 0.8],
                vec![
                    Attack {
                        z: vec![-0.3, 0.7],
                        omega: 0.25,
                    },
                    Attack {
                        z: vec![-0.5, 0.9],
                        omega: 0.25,
                    },
                ],
                0.5,
            ),
        ];
        let pi = CouplingMeasure::new(groups, z_box).unwrap();
        let nu = ParamMeasure::new(
            vec![
                ParamParticle::new(1.0, vec![0.5], 0.5),
                ParamParticle::new(-0.5, vec![-1.0], 0.5),
            ],
            BoxDomain::default_theta(1),
        )
        .unwrap();
        SolverState::new(pi, nu)
    }

    fn table_model() -> PayoffModel {
        PayoffModel::new(Activation::Sigmoid, Loss::Squared, 10.0, AttackTarget::FullZ)
    }

    fn table_cfg() -> SolverConfig {
        SolverConfig {
            schedule: StepSchedule::InverseT { eta0: 0.1 },
            kappa: 0.25,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn uniform_group_payoff_leaves_weights_unchanged() {
        // all attacks of a group coincide -> equal u_pi -> the exponential
        // factor cancels in the renormalization
        let z = vec![0.2, 0.3];
        let pi = CouplingMeasure::new(
            vec![AttackGroup::new(
                z.clone(),
                vec![
                    Attack {
                        z: z.clone(),
                        omega: 0.7,
                    },
                    Attack {
                        z: z.clone(),
                        omega: 0.3,
                    },
                ],
                1.0,
            )],
            BoxDomain::default_z(1),
        )
        .unwrap();
        let nu = ParamMeasure::new(
            vec![ParamParticle::new(1.0, vec![0.5], 1.0)],
            BoxDomain::default_theta(1),
        )
        .unwrap();
        let mut state = SolverState::new(pi, nu);
        step(&mut state, &table_model(), &table_cfg()).unwrap();
        assert!((state.pi.groups[0].attacks[0].omega - 0.7).abs() < 1e-12);
        assert!((state.pi.groups[0].attacks[1].omega - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_eta_freezes_everything_but_the_clock() {
        let mut state = tiny_state();
        let before = state.clone();
        let cfg = SolverConfig {
            schedule: StepSchedule::Constant { eta0: 1e-300 },
            ..table_cfg()
        };
        // eta must be positive; an effectively-zero step leaves the state
        // numerically unchanged
        step(&mut state, &table_model(), &cfg).unwrap();
        assert_eq!(state.t, before.t + 1);
        for (ga, gb) in state.pi.groups.iter().zip(&before.pi.groups) {
            for (a, b) in ga.attacks.iter().zip(&gb.attacks) {
                assert_eq!(a.z, b.z);
                assert!((a.omega - b.omega).abs() < 1e-15);
            }
        }
        for (a, b) in state.nu.particles.iter().zip(&before.nu.particles) {
            assert_eq!(a.position(), b.position());
            assert!((a.alpha - b.alpha).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_matches_hand_computation() {
        // straight-line hand execution of the four update formulas on the
        // 2-anchor / 2-attack / 2-parameter instance, kappa = 0.25,
        // eta_0 = 0.1, sigmoid + squared loss, c_a = 10
        let state0 = tiny_state();
        let model = table_model();
        let cfg = table_cfg();
        let mut state = state0.clone();
        step(&mut state, &model, &cfg).unwrap();

        let eta = 0.1;
        let kappa = 0.25;
        let c_a = 10.0;
        let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
        let h = |x: f64| {
            0.5 * 1.0 * sigmoid(0.5 * x) + 0.5 * (-0.5) * sigmoid(-x)
        };

        // ascent: per attack, from the time-0 measures
        let mut new_attacks: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
        for g in &state0.pi.groups {
            let (zx, zy) = (g.anchor()[0], g.anchor()[1]);
            let mut rows = Vec::new();
            for at in &g.attacks {
                let (xt, yt) = (at.z[0], at.z[1]);
                let hv = h(xt);
                let u = (hv - yt) * (hv - yt) - c_a * ((zx - xt).powi(2) + (zy - yt).powi(2));
                let d1 = 2.0 * (hv - yt);
                let s05 = sigmoid(0.5 * xt);
                let sm1 = sigmoid(-xt);
                let dh = 0.5 * 1.0 * s05 * (1.0 - s05) * 0.5
                    - 0.5 * (-0.5) * sm1 * (1.0 - sm1);
                let gx = d1 * dh - 2.0 * c_a * (xt - zx);
                let gy = 2.0 * (yt - hv) - 2.0 * c_a * (yt - zy);
                let znew = vec![
                    (xt + eta * gx).clamp(-1.5, 1.5),
                    (yt + eta * gy).clamp(0.0, 1.0),
                ];
                rows.push((znew, at.omega * (eta * kappa * u).exp()));
            }
            let total: f64 = rows.iter().map(|r| r.1).sum();
            let scale = g.group_mass() / total;
            for r in rows.iter_mut() {
                r.1 *= scale;
            }
            new_attacks.push(rows);
        }
        for (g, expected) in state.pi.groups.iter().zip(&new_attacks) {
            for (a, (ez, eo)) in g.attacks.iter().zip(expected) {
                for (av, ev) in a.z.iter().zip(ez) {
                    assert!((av - ev).abs() < 1e-12, "position {av} vs {ev}");
                }
                assert!((a.omega - eo).abs() < 1e-12, "weight {} vs {eo}", a.omega);
            }
        }

        // descent: per particle, also from the time-0 measures
        let mut new_params: Vec<(Vec<f64>, f64)> = Vec::new();
        for p in &state0.nu.particles {
            let (a, b) = (p.a, p.b[0]);
            let mut u = 0.0;
            let mut ga = 0.0;
            let mut gb = 0.0;
            for g in &state0.pi.groups {
                for at in &g.attacks {
                    let (xt, yt) = (at.z[0], at.z[1]);
                    let d1 = 2.0 * (h(xt) - yt);
                    let fb = sigmoid(b * xt);
                    u += at.omega * d1 * a * fb;
                    ga += at.omega * d1 * fb;
                    gb += at.omega * d1 * a * fb * (1.0 - fb) * xt;
                }
            }
            let pos = vec![(a - eta * ga).clamp(-4.0, 4.0), (b - eta * gb).clamp(-4.0, 4.0)];
            new_params.push((pos, p.alpha * (-eta * kappa * u).exp()));
        }
        let total: f64 = new_params.iter().map(|r| r.1).sum();
        for r in new_params.iter_mut() {
            r.1 /= total;
        }
        for (p, (epos, ealpha)) in state.nu.particles.iter().zip(&new_params) {
            for (pv, ev) in p.position().iter().zip(epos) {
                assert!((pv - ev).abs() < 1e-12, "theta {pv} vs {ev}");
            }
            assert!((p.alpha - ealpha).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_and_uncentered_weight_updates_agree() {
        let state = tiny_state();
        let model = table_model();
        let cfg = table_cfg();
        let mut stepped = state.clone();
        step(&mut stepped, &model, &cfg).unwrap();

        let eta = 0.1;
        for (g0, g1) in state.pi.groups.iter().zip(&stepped.pi.groups) {
            let us: Vec<f64> = g0
                .attacks
                .iter()
                .map(|a| model.u_pi(&state.nu, g0.anchor(), &a.z).unwrap())
                .collect();
            let mean = us.iter().sum::<f64>() / us.len() as f64;
            // raw form
            let raw: Vec<f64> = g0
                .attacks
                .iter()
                .zip(&us)
                .map(|(a, u)| a.omega * (eta * cfg.kappa * u).exp())
                .collect();
            let rt: f64 = raw.iter().sum();
            // mean-centered form
            let centered: Vec<f64> = g0
                .attacks
                .iter()
                .zip(&us)
                .map(|(a, u)| a.omega * (eta * cfg.kappa * (u - mean)).exp())
                .collect();
            let ct: f64 = centered.iter().sum();
            for ((a1, r), c) in g1.attacks.iter().zip(&raw).zip(&centered) {
                let m = g0.group_mass();
                assert!((a1.omega - r / rt * m).abs() < 1e-12);
                assert!((a1.omega - c / ct * m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masses_conserved_and_positions_boxed_over_many_steps() {
        let mut state = tiny_state();
        let model = table_model();
        let cfg = SolverConfig {
            schedule: StepSchedule::Constant { eta0: 0.05 },
            ..table_cfg()
        };
        let initial_anchors: Vec<Vec<u64>> = state
            .pi
            .groups
            .iter()
            .map(|g| g.anchor().iter().map(|v| v.to_bits()).collect())
            .collect();
        for _ in 0..1000 {
            step(&mut state, &model, &cfg).unwrap();
        }
        let r = mass_residuals(&state.pi, &state.nu);
        assert!(r.max() <= 1e-10, "residuals {r:?}");
        for (g, bits) in state.pi.groups.iter().zip(&initial_anchors) {
            let now: Vec<u64> = g.anchor().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "anchor moved");
            for a in &g.attacks {
                assert!(state.pi.z_box.contains(&a.z));
                assert!(a.omega > 0.0, "weights must stay strictly positive");
            }
        }
        for p in &state.nu.particles {
            assert!(state.nu.theta_box.contains(&p.position()));
            assert!(p.alpha > 0.0);
        }
    }

    #[test]
    fn run_with_zero_steps_records_single_checkpoint() {
        let state = tiny_state();
        let cfg = SolverConfig {
            max_steps: 0,
            ..table_cfg()
        };
        let mut avg = Averager::new(AveragerKind::FullMixture, 0);
        let (trace, final_state) = run(state, &table_model(), &cfg, &mut avg).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].step, 0);
        assert_eq!(trace.snapshots.len(), 1);
        assert_eq!(final_state.t, 0);
        assert_eq!(avg.snapshots_used(), 1);
    }

    #[test]
    fn toy_regression_payoff_stabilizes() {
        let data = gen_regression_1d(16, 0.1, 5).unwrap();
        let spec = InitSpec {
            nu0: Nu0Spec::UniformBox,
            pi0: Pi0Spec::Diagonal,
            n_attacks: 4,
            m_particles: 32,
            seed: 5,
            theta_box: BoxDomain::default_theta(1),
        };
        let state = init_state(&data, &spec).unwrap();
        let cfg = SolverConfig {
            max_steps: 2000,
            checkpoint_every: 10,
            snapshot_every: 0,
            ..table_cfg()
        };
        let mut avg = Averager::new(AveragerKind::WeightsOnly, 0);
        let (trace, _) = run(state, &table_model(), &cfg, &mut avg).unwrap();
        let payoffs: Vec<f64> = trace.rows.iter().map(|r| r.payoff).collect();
        let quartile = payoffs.len() / 4;
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let first = var(&payoffs[..quartile]);
        let last = var(&payoffs[payoffs.len() - quartile..]);
        assert!(
            last < first,
            "expected the payoff to stabilize: first-quartile var {first}, last {last}"
        );
    }

    #[test]
    fn strongly_concave_mode_advances_ascent_counter_k_times() {
        let mut state = tiny_state();
        let cfg = SolverConfig {
            ascent_uses_eta: false,
            inner_repeats: 4,
            ascent_dt: 0.05,
            ..table_cfg()
        };
        let model = PayoffModel::new(Activation::Sigmoid, Loss::Squared, 10.0, AttackTarget::FullZ);
        for _ in 0..3 {
            step(&mut state, &model, &cfg).unwrap();
        }
        assert_eq!(state.t, 3);
        assert_eq!(state.ascent_steps, 12);
    }

    #[test]
    fn ode_rates_vanish_for_constant_payoff_within_group() {
        let z = vec![0.2, 0.3];
        let pi = CouplingMeasure::new(
            vec![AttackGroup::new(
                z.clone(),
                vec![
                    Attack {
                        z: z.clone(),
                        omega: 0.6,
                    },
                    Attack {
                        z: z.clone(),
                        omega: 0.4,
                    },
                ],
                1.0,
            )],
            BoxDomain::default_z(1),
        )
        .unwrap();
        let nu = ParamMeasure::new(
            vec![ParamParticle::new(1.0, vec![0.5], 1.0)],
            BoxDomain::default_theta(1),
        )
        .unwrap();
        let state = SolverState::new(pi, nu);
        let rhs = ode_rhs(&state, &table_model(), &table_cfg()).unwrap();
        for rate in &rhs.omega_rate[0] {
            assert!(rate.abs() < 1e-15);
        }
    }

    #[test]
    fn ode_alpha_rates_sum_to_zero() {
        let state = tiny_state();
        let rhs = ode_rhs(&state, &table_model(), &table_cfg()).unwrap();
        let total: f64 = rhs.alpha_rate.iter().sum();
        assert!(total.abs() < 1e-12);
        for rates in &rhs.omega_rate {
            let group_total: f64 = rates.iter().sum();
            assert!(group_total.abs() < 1e-12);
        }
    }

    #[test]
    fn euler_step_matches_solver_step_to_second_order() {
        // Richardson order estimate on the mass variables: the solver's
        // exponential update and the Euler step of the centered rates agree
        // to O(dt^2) per step.
        let model = table_model();
        let mut errs = Vec::new();
        for &dt in &[1e-2, 1e-3] {
            let state = tiny_state();
            let cfg = SolverConfig {
                schedule: StepSchedule::Constant { eta0: dt },
                ..table_cfg()
            };
            let rhs = ode_rhs(&state, &model, &cfg).unwrap();
            let mut stepped = state.clone();
            step(&mut stepped, &model, &cfg).unwrap();
            let mut max_err: f64 = 0.0;
            for (gi, g) in stepped.pi.groups.iter().enumerate() {
                for (ai, a) in g.attacks.iter().enumerate() {
                    let euler = state.pi.groups[gi].attacks[ai].omega + dt * rhs.omega_rate[gi][ai];
                    max_err = max_err.max((a.omega - euler).abs());
                }
            }
            for (ki, p) in stepped.nu.particles.iter().enumerate() {
                let euler = state.nu.particles[ki].alpha + dt * rhs.alpha_rate[ki];
                max_err = max_err.max((p.alpha - euler).abs());
            }
            errs.push(max_err);
        }
        let order = (errs[0] / errs[1]).log10();
        assert!(
            order >= 1.9,
            "observed order {order} (errors {errs:?})"
        );
    }

    #[test]
    fn nan_position_aborts_with_diagnostic() {
        let mut state = tiny_state();
        state.pi.groups[1].attacks[0].z[0] = f64::NAN;
        let err = step(&mut state, &table_model(), &table_cfg()).unwrap_err();
        match err {
            DynamicsError::NonFinite { step, .. } => assert_eq!(step, 0),
            other => panic!("expected a non-finite abort, got {other}"),
        }
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_traces_across_thread_counts() {
        let data = gen_regression_1d(8, 0.1, 9).unwrap();
        let spec = InitSpec {
            nu0: Nu0Spec::UniformBox,
            pi0: Pi0Spec::ConditionalNoise { std: 0.1 },
            n_attacks: 4,
            m_particles: 16,
            seed: 9,
            theta_box: BoxDomain::default_theta(1),
        };
        let cfg = SolverConfig {
            max_steps: 50,
            checkpoint_every: 5,
            snapshot_every: 0,
            ..table_cfg()
        };
        let model = table_model();
        let run_with_threads = |threads: usize| -> Vec<u8> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let state = init_state(&data, &spec).unwrap();
                let mut avg = Averager::new(AveragerKind::WeightsOnly, 0);
                let (trace, _) = run(state, &model, &cfg, &mut avg).unwrap();
                let mut buf = Vec::new();
                trace.write_csv(&mut buf).unwrap();
                buf
            })
        };
        let single = run_with_threads(1);
        let multi = run_with_threads(8);
        assert_eq!(single, multi, "trace bytes differ across thread counts");
    }
}
