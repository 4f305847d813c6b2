//! Closed-form payoff of the adversarial game, its first variations in each
//! player's measure, and the Euclidean gradients driving the particle
//! updates. Everything is hand-derived for the shallow-network
//! regression/classification kernel; there is no autodiff.
//!
//! Conventions: a data point is `z = (x, y)` with `x` of dimension d' and a
//! scalar label `y` stored last; a parameter is `theta = (a, b)` with the
//! output weight `a` stored first.

use thiserror::Error;

use crate::measures::{CouplingMeasure, ParamMeasure};
use crate::numerics::{dot, ksum, sq_dist, Kahan};

#[derive(Debug, Error)]
pub enum PayoffError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("logistic loss undefined: |1 - y' - y| = 0 at (prediction {prediction}, label {label})")]
    LogisticDomain { prediction: f64, label: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Floor applied to `|1 - y' - y|` before taking the logarithm, keeping the
/// logistic loss finite up to its singular set.
pub const LOGISTIC_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    SquaredRelu,
}

impl Activation {
    #[inline]
    pub fn value(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                // numerically stable on both tails
                if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Relu => t.max(0.0),
            Activation::SquaredRelu => {
                let p = t.max(0.0);
                p * p
            }
        }
    }

    /// Derivative; the ReLU subgradient at the kink is taken to be 0.
    #[inline]
    pub fn deriv(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let f = self.value(t);
                f * (1.0 - f)
            }
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SquaredRelu => 2.0 * t.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    Squared,
    Logistic,
}

impl Loss {
    /// `l(prediction, label)`.
    pub fn value(self, prediction: f64, label: f64) -> Result<f64, PayoffError> {
        match self {
            Loss::Squared => Ok((prediction - label) * (prediction - label)),
            Loss::Logistic => {
                let u = 1.0 - label - prediction;
                if u == 0.0 {
                    return Err(PayoffError::LogisticDomain { prediction, label });
                }
                Ok(-(u.abs().max(LOGISTIC_FLOOR)).ln())
            }
        }
    }

    /// Partial derivative in the first slot (the prediction).
    pub fn d1(self, prediction: f64, label: f64) -> Result<f64, PayoffError> {
        match self {
            Loss::Squared => Ok(2.0 * (prediction - label)),
            Loss::Logistic => {
                let u = 1.0 - label - prediction;
                if u == 0.0 {
                    return Err(PayoffError::LogisticDomain { prediction, label });
                }
                Ok(1.0 / (u.signum() * u.abs().max(LOGISTIC_FLOOR)))
            }
        }
    }

    /// Partial derivative in the second slot (the label).
    pub fn d2(self, prediction: f64, label: f64) -> Result<f64, PayoffError> {
        match self {
            Loss::Squared => Ok(2.0 * (label - prediction)),
            // 1 - y' - y is symmetric in its two arguments
            Loss::Logistic => self.d1(prediction, label),
        }
    }
}

/// Which coordinates of a data point the adversary may move. Labels are held
/// fixed with `XOnly`, the practical default for classification; `FullZ`
/// exposes the whole point, matching the quadratic transport cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackTarget {
    XOnly,
    FullZ,
}

/// Activation + loss + adversarial-cost bundle.
#[derive(Clone, Debug)]
pub struct PayoffModel {
    pub activation: Activation,
    pub loss: Loss,
    /// Adversarial cost coefficient; its reciprocal acts as the attack budget.
    pub c_a: f64,
    pub attack_target: AttackTarget,
}

impl PayoffModel {
    pub fn new(activation: Activation, loss: Loss, c_a: f64, attack_target: AttackTarget) -> Self {
        assert!(c_a > 0.0, "adversarial cost coefficient must be positive");
        Self {
            activation,
            loss,
            c_a,
            attack_target,
        }
    }

    /// Ensemble prediction `h(x) = sum_k alpha_k a_k f(b_k . x)`.
    pub fn predict(&self, nu: &ParamMeasure, x: &[f64]) -> Result<f64, PayoffError> {
        if x.len() != nu.input_dim() {
            return Err(PayoffError::DimensionMismatch {
                expected: nu.input_dim(),
                got: x.len(),
            });
        }
        let mut acc = Kahan::new();
        for p in &nu.particles {
            acc.add(p.alpha * p.a * self.activation.value(dot(&p.b, x)));
        }
        Ok(acc.value())
    }

    /// Split a data point into its input and label parts.
    #[inline]
    fn split(z: &[f64]) -> (&[f64], f64) {
        let (x, y) = z.split_at(z.len() - 1);
        (x, y[0])
    }

    /// Game payoff: risk of the attacked data minus the transport cost paid
    /// by the adversary.
    pub fn payoff(&self, pi: &CouplingMeasure, nu: &ParamMeasure) -> Result<f64, PayoffError> {
        let mut acc = Kahan::new();
        for g in &pi.groups {
            for a in &g.attacks {
                acc.add(a.omega * self.u_pi(nu, g.anchor(), &a.z)?);
            }
        }
        let v = acc.value();
        if !v.is_finite() {
            return Err(PayoffError::NonFinite("payoff"));
        }
        Ok(v)
    }

    /// First variation in the coupling direction, evaluated at
    /// `(anchor, attack)`. The payoff is linear in the coupling, so this does
    /// not depend on the coupling itself.
    pub fn u_pi(&self, nu: &ParamMeasure, anchor: &[f64], attack: &[f64]) -> Result<f64, PayoffError> {
        let (x_t, y_t) = Self::split(attack);
        let h = self.predict(nu, x_t)?;
        Ok(self.loss.value(h, y_t)? - self.c_a * sq_dist(anchor, attack))
    }

    /// Ascent direction for an attack particle: gradient of `u_pi` in the
    /// attacked point. With `XOnly` the label component is forced to zero.
    pub fn grad_u_pi(
        &self,
        nu: &ParamMeasure,
        anchor: &[f64],
        attack: &[f64],
    ) -> Result<Vec<f64>, PayoffError> {
        let (x_t, y_t) = Self::split(attack);
        let (x, y) = Self::split(anchor);
        let h = self.predict(nu, x_t)?;
        let d1 = self.loss.d1(h, y_t)?;
        let dim = attack.len();
        let mut grad = vec![0.0; dim];
        // risk part in x~: d1 * sum_k alpha a f'(b.x~) b
        for p in &nu.particles {
            let fp = self.activation.deriv(dot(&p.b, x_t));
            let coeff = d1 * p.alpha * p.a * fp;
            for (gi, bi) in grad[..dim - 1].iter_mut().zip(&p.b) {
                *gi += coeff * bi;
            }
        }
        // transport part in x~
        for ((gi, &xt), &xi) in grad[..dim - 1].iter_mut().zip(x_t).zip(x) {
            *gi -= 2.0 * self.c_a * (xt - xi);
        }
        grad[dim - 1] = match self.attack_target {
            AttackTarget::XOnly => 0.0,
            AttackTarget::FullZ => self.loss.d2(h, y_t)? - 2.0 * self.c_a * (y_t - y),
        };
        Ok(grad)
    }

    /// `u_pi` and its gradient together, sharing one ensemble prediction.
    pub fn u_and_grad_u_pi(
        &self,
        nu: &ParamMeasure,
        anchor: &[f64],
        attack: &[f64],
    ) -> Result<(f64, Vec<f64>), PayoffError> {
        let (x_t, y_t) = Self::split(attack);
        let (x, y) = Self::split(anchor);
        let h = self.predict(nu, x_t)?;
        let value = self.loss.value(h, y_t)? - self.c_a * sq_dist(anchor, attack);
        let d1 = self.loss.d1(h, y_t)?;
        let dim = attack.len();
        let mut grad = vec![0.0; dim];
        for p in &nu.particles {
            let fp = self.activation.deriv(dot(&p.b, x_t));
            let coeff = d1 * p.alpha * p.a * fp;
            for (gi, bi) in grad[..dim - 1].iter_mut().zip(&p.b) {
                *gi += coeff * bi;
            }
        }
        for ((gi, &xt), &xi) in grad[..dim - 1].iter_mut().zip(x_t).zip(x) {
            *gi -= 2.0 * self.c_a * (xt - xi);
        }
        grad[dim - 1] = match self.attack_target {
            AttackTarget::XOnly => 0.0,
            AttackTarget::FullZ => self.loss.d2(h, y_t)? - 2.0 * self.c_a * (y_t - y),
        };
        Ok((value, grad))
    }

    /// First variation in the parameter direction at `theta = (a, b)`.
    pub fn u_nu(
        &self,
        pi: &CouplingMeasure,
        nu: &ParamMeasure,
        a: f64,
        b: &[f64],
    ) -> Result<f64, PayoffError> {
        let cache = RiskCache::build(pi, nu, self)?;
        Ok(cache.u_nu(a, b))
    }

    /// Descent direction for a parameter particle: gradient of `u_nu` in
    /// `(a, b)`, laid out as `[d/da, d/db...]`.
    pub fn grad_u_nu(
        &self,
        pi: &CouplingMeasure,
        nu: &ParamMeasure,
        a: f64,
        b: &[f64],
    ) -> Result<Vec<f64>, PayoffError> {
        let cache = RiskCache::build(pi, nu, self)?;
        Ok(cache.grad_u_nu(a, b))
    }
}

/// Per-attack quantities shared by every parameter particle: the ensemble
/// prediction and the loss derivative at each attacked point. Building this
/// once per solver step turns the descent block from quadratic to linear in
/// the ensemble size.
pub struct RiskCache {
    /// One entry per attack, in group-major order: (x~, omega * d1).
    entries: Vec<(Vec<f64>, f64)>,
    activation: Activation,
}

impl RiskCache {
    pub fn build(
        pi: &CouplingMeasure,
        nu: &ParamMeasure,
        model: &PayoffModel,
    ) -> Result<Self, PayoffError> {
        let mut entries = Vec::with_capacity(pi.n_attacks());
        for g in &pi.groups {
            for at in &g.attacks {
                let (x_t, y_t) = PayoffModel::split(&at.z);
                let h = model.predict(nu, x_t)?;
                let d1 = model.loss.d1(h, y_t)?;
                entries.push((x_t.to_vec(), at.omega * d1));
            }
        }
        Ok(Self {
            entries,
            activation: model.activation,
        })
    }

    /// `u_nu(theta) = sum_ij omega_ij d1_ij a f(b . x~_ij)`.
    pub fn u_nu(&self, a: f64, b: &[f64]) -> f64 {
        let mut acc = Kahan::new();
        for (x_t, wd1) in &self.entries {
            acc.add(wd1 * a * self.activation.value(dot(b, x_t)));
        }
        acc.value()
    }

    /// Gradient of `u_nu` in `(a, b)`.
    pub fn grad_u_nu(&self, a: f64, b: &[f64]) -> Vec<f64> {
        let mut ga = Kahan::new();
        let mut gb = vec![Kahan::new(); b.len()];
        for (x_t, wd1) in &self.entries {
            let t = dot(b, x_t);
            ga.add(wd1 * self.activation.value(t));
            let coeff = wd1 * a * self.activation.deriv(t);
            for (gbi, xi) in gb.iter_mut().zip(x_t) {
                gbi.add(coeff * xi);
            }
        }
        let mut grad = Vec::with_capacity(1 + b.len());
        grad.push(ga.value());
        grad.extend(gb.iter().map(|k| k.value()));
        grad
    }

    /// Mean of `u_nu` against the ensemble itself, `int u_nu d nu`.
    pub fn mean_u_nu(&self, nu: &ParamMeasure) -> f64 {
        ksum(
            nu.particles
                .iter()
                .map(|p| p.alpha * self.u_nu(p.a, &p.b)),
        )
    }
}
