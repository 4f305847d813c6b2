//! Equilibrium-quality estimation and robustness evaluation.
//!
//! The Nash gap of a candidate pair is estimated from the two best
//! responses: the adversary's, computed anchor by anchor with multi-start
//! projected gradient ascent (the payoff is linear in the coupling, so a
//! Dirac per anchor is optimal), and the learner's, computed by running
//! descent-only refits with backtracking against the frozen coupling.
//! Robustness of a trained ensemble is measured by clean accuracy against
//! PGD-attacked accuracy.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::measures::{Attack, AttackGroup, CouplingMeasure, MeasureError, ParamMeasure};
use crate::numerics::{dot, ksum};
use crate::payoff::{AttackTarget, PayoffError, PayoffModel, RiskCache};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Payoff(#[from] PayoffError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Multi-start projected gradient ascent budget for the adversary's best
/// response.
#[derive(Clone, Copy, Debug)]
pub struct AdversaryOpts {
    /// Uniform restarts per anchor, in addition to the anchor itself and the
    /// best current support point of the coupling.
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for AdversaryOpts {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 200,
            seed: 0,
        }
    }
}

/// Refit budget for the learner's best response. Weights stay frozen by
/// default; enabling `update_weights` runs the multiplicative update under
/// the same backtracking acceptance.
#[derive(Clone, Copy, Debug)]
pub struct LearnerOpts {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub update_weights: bool,
    pub kappa: f64,
}

impl Default for LearnerOpts {
    fn default() -> Self {
        Self {
            epochs: 5,
            steps_per_epoch: 20,
            update_weights: false,
            kappa: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NashGapOpts {
    pub adversary: AdversaryOpts,
    pub learner: LearnerOpts,
}

/// Gap estimate at a candidate pair. `gap` is the sum of the two
/// best-response improvements; `r_a` and `r_m` are the improvements
/// relative to the payoff at the candidate (absolute improvements when the
/// payoff is numerically zero, see `degenerate_value`).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NashGapReport {
    pub payoff_at_solution: f64,
    pub best_response_payoff_adv: f64,
    pub best_response_payoff_learner: f64,
    pub gap: f64,
    pub r_a: f64,
    pub r_m: f64,
    #[serde(skip)]
    pub degenerate_value: bool,
}

impl NashGapReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Backtracking projected ascent of `u_pi(nu, anchor, .)` from one start.
fn ascend_attack(
    model: &PayoffModel,
    nu: &ParamMeasure,
    anchor: &[f64],
    start: &[f64],
    z_box: &crate::measures::BoxDomain,
    max_iters: usize,
) -> Result<(Vec<f64>, f64), PayoffError> {
    let mut z = z_box.projected(start);
    let mut value = model.u_pi(nu, anchor, &z)?;
    for _ in 0..max_iters {
        let grad = model.grad_u_pi(nu, anchor, &z)?;
        let mut tau = 1.0;
        let mut moved = false;
        while tau >= 1e-14 {
            let mut cand = z.clone();
            for (c, g) in cand.iter_mut().zip(&grad) {
                *c += tau * g;
            }
            z_box.project(&mut cand);
            let cand_value = model.u_pi(nu, anchor, &cand)?;
            if cand_value > value {
                z = cand;
                value = cand_value;
                moved = true;
                break;
            }
            tau *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok((z, value))
}

/// Best response of the adversary against a fixed ensemble: for each anchor
/// independently, maximize the first variation over the data box and place
/// the whole group mass on the best point found. The coupling's own support
/// points seed the search, so the result is never worse than the coupling
/// it starts from.
pub fn adversary_best_response(
    nu_bar: &ParamMeasure,
    pi_bar: &CouplingMeasure,
    model: &PayoffModel,
    opts: &AdversaryOpts,
) -> Result<(CouplingMeasure, f64), EvalError> {
    let z_box = pi_bar.z_box.clone();
    let groups: Vec<Result<AttackGroup, EvalError>> = pi_bar
        .groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let anchor = g.anchor().to_vec();
            // scan the group's support; ascend only from the best point
            let mut best_support: Option<(f64, &Attack)> = None;
            for a in &g.attacks {
                let v = model.u_pi(nu_bar, &anchor, &a.z)?;
                if best_support.as_ref().is_none_or(|(bv, _)| v > *bv) {
                    best_support = Some((v, a));
                }
            }
            let mut starts: Vec<Vec<f64>> = vec![anchor.clone()];
            if let Some((_, a)) = best_support {
                starts.push(a.z.clone());
            }
            let mut rng = stream_rng(opts.seed, "adv-br", i as u64);
            for _ in 0..opts.restarts {
                let mut s = z_box.sample_uniform(&mut rng);
                if model.attack_target == AttackTarget::XOnly {
                    let last = s.len() - 1;
                    s[last] = anchor[last];
                }
                starts.push(s);
            }
            let mut best: Option<(Vec<f64>, f64)> = None;
            for s in &starts {
                let (z, v) = ascend_attack(model, nu_bar, &anchor, s, &z_box, opts.max_iters)?;
                if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                    best = Some((z, v));
                }
            }
            let (z, _) = best.expect("at least one start");
            Ok(AttackGroup::new(
                anchor,
                vec![Attack {
                    z,
                    omega: g.group_mass(),
                }],
                g.group_mass(),
            ))
        })
        .collect();
    let groups = groups.into_iter().collect::<Result<Vec<_>, _>>()?;
    let br = CouplingMeasure::new(groups, z_box)?;
    let payoff = model.payoff(&br, nu_bar)?;
    Ok((br, payoff))
}

/// Best response of the learner against a frozen coupling: descent-only
/// refit from `nu_init` with backtracking step control, so the payoff never
/// increases. Runs `epochs * steps_per_epoch` gradient steps.
pub fn learner_best_response(
    pi_bar: &CouplingMeasure,
    nu_init: &ParamMeasure,
    model: &PayoffModel,
    opts: &LearnerOpts,
) -> Result<(ParamMeasure, f64), EvalError> {
    let mut nu = nu_init.clone();
    let mut value = model.payoff(pi_bar, &nu)?;
    let theta_box = nu.theta_box.clone();
    'outer: for _ in 0..opts.epochs.saturating_mul(opts.steps_per_epoch) {
        let cache = RiskCache::build(pi_bar, &nu, model)?;
        let grads: Vec<Vec<f64>> = nu
            .particles
            .par_iter()
            .map(|p| cache.grad_u_nu(p.a, &p.b))
            .collect();
        let us: Vec<f64> = if opts.update_weights {
            nu.particles
                .par_iter()
                .map(|p| cache.u_nu(p.a, &p.b))
                .collect()
        } else {
            Vec::new()
        };
        let mut tau = 1.0;
        loop {
            let mut cand = nu.clone();
            for (p, g) in cand.particles.iter_mut().zip(&grads) {
                let mut pos = p.position();
                for (x, gi) in pos.iter_mut().zip(g) {
                    *x -= tau * gi;
                }
                theta_box.project(&mut pos);
                p.set_position(&pos);
            }
            if opts.update_weights {
                let max_e = us
                    .iter()
                    .map(|u| -tau * opts.kappa * u)
                    .fold(f64::NEG_INFINITY, f64::max);
                for (p, u) in cand.particles.iter_mut().zip(&us) {
                    p.alpha *= (-tau * opts.kappa * u - max_e).exp();
                }
                let total = ksum(cand.particles.iter().map(|p| p.alpha));
                for p in cand.particles.iter_mut() {
                    p.alpha /= total;
                }
            }
            let cand_value = model.payoff(pi_bar, &cand)?;
            if cand_value < value {
                nu = cand;
                value = cand_value;
                break;
            }
            tau *= 0.5;
            if tau < 1e-14 {
                break 'outer; // converged: no descent direction improves
            }
        }
    }
    Ok((nu, value))
}

/// Estimate the Nash gap of an averaged pair from the two best responses.
pub fn nash_gap(
    pi_bar: &CouplingMeasure,
    nu_bar: &ParamMeasure,
    model: &PayoffModel,
    opts: &NashGapOpts,
) -> Result<NashGapReport, EvalError> {
    let value = model.payoff(pi_bar, nu_bar)?;
    let (_, best_adv) = adversary_best_response(nu_bar, pi_bar, model, &opts.adversary)?;
    let (_, best_learner) = learner_best_response(pi_bar, nu_bar, model, &opts.learner)?;
    let gap = best_adv - best_learner;
    let degenerate = value.abs() < 1e-12;
    let (r_a, r_m) = if degenerate {
        (best_adv - value, value - best_learner)
    } else {
        ((best_adv - value) / value.abs(), (value - best_learner) / value.abs())
    };
    Ok(NashGapReport {
        payoff_at_solution: value,
        best_response_payoff_adv: best_adv,
        best_response_payoff_learner: best_learner,
        gap,
        r_a,
        r_m,
        degenerate_value: degenerate,
    })
}

/// Sign-based iterated attack configuration.
#[derive(Clone, Copy, Debug)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 0.04,
        }
    }
}

/// Projected gradient attack on the inputs: each step moves every
/// coordinate by `step_size` in the sign of the loss gradient, clipped to
/// the l-infinity ball of radius `epsilon` around the original input
/// intersected with the data box. Labels are untouched.
pub fn pgd_attack(
    nu_bar: &ParamMeasure,
    dataset: &Dataset,
    pgd: &PgdConfig,
    epsilon: f64,
    model: &PayoffModel,
) -> Result<Dataset, EvalError> {
    let d = dataset.input_dim();
    let lo = dataset.z_box.lo()[..d].to_vec();
    let hi = dataset.z_box.hi()[..d].to_vec();
    let attacked: Vec<Result<Vec<f64>, EvalError>> = dataset
        .inputs
        .par_iter()
        .zip(&dataset.labels)
        .map(|(x0, &y)| {
            let mut x = x0.clone();
            for _ in 0..pgd.steps {
                let h = model.predict(nu_bar, &x)?;
                let d1 = model.loss.d1(h, y)?;
                let mut grad = vec![0.0; d];
                for p in &nu_bar.particles {
                    let coeff = d1 * p.alpha * p.a * model.activation.deriv(dot(&p.b, &x));
                    for (gc, bc) in grad.iter_mut().zip(&p.b) {
                        *gc += coeff * bc;
                    }
                }
                for c in 0..d {
                    let sign = if grad[c] > 0.0 {
                        1.0
                    } else if grad[c] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let moved = x[c] + pgd.step_size * sign;
                    x[c] = moved.clamp((x0[c] - epsilon).max(lo[c]), (x0[c] + epsilon).min(hi[c]));
                }
            }
            Ok(x)
        })
        .collect();
    let inputs = attacked.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        inputs,
        labels: dataset.labels.clone(),
        z_box: dataset.z_box.clone(),
    })
}

/// Fraction of points whose thresholded prediction matches the binary
/// label; ties at the threshold resolve to class 1.
pub fn accuracy(
    nu_bar: &ParamMeasure,
    dataset: &Dataset,
    threshold: f64,
    model: &PayoffModel,
) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut hits = 0usize;
    for (x, &y) in dataset.inputs.iter().zip(&dataset.labels) {
        let h = model.predict(nu_bar, x)?;
        let predicted_one = h >= threshold;
        let actual_one = y >= 0.5;
        if predicted_one == actual_one {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}
