//! Weighted particle representations of the two players' measures.
//!
//! The learner's measure over network parameters is a weighted ensemble on a
//! compact parameter box. The adversary's measure is a coupling on the data
//! space: each data point (anchor) carries a group of attack particles, and
//! the anchor together with its group mass is frozen for the whole run, so
//! the first marginal of the coupling stays equal to the empirical data
//! measure by construction.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::numerics::ksum;

/// Tolerance for mass-conservation invariants (double precision over at most
/// ~1e6 accumulated operations).
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("group {group} has non-positive mass {mass}")]
    ZeroMassGroup { group: usize, mass: f64 },
    #[error("mass invariant violated: {what} = {value}, expected {expected} (tol {tol})")]
    MassInvariant {
        what: &'static str,
        value: f64,
        expected: f64,
        tol: f64,
    },
    #[error("point outside its box at coordinate {coord}: {value} not in [{lo}, {hi}]")]
    OutOfBox {
        coord: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("empty measure: {0}")]
    Empty(&'static str),
    #[error("invalid box: lo[{coord}] = {lo} > hi[{coord}] = {hi}")]
    InvalidBox { coord: usize, lo: f64, hi: f64 },
    #[error("anchors differ between mixed couplings at group {group}")]
    AnchorMismatch { group: usize },
    #[error("csv parse error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned compact box; the concrete realization of the compact domains
/// the dynamics are confined to. Projection is component-wise clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, MeasureError> {
        if lo.len() != hi.len() {
            return Err(MeasureError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(MeasureError::InvalidBox {
                    coord: i,
                    lo: l,
                    hi: h,
                });
            }
        }
        Ok(Self { lo, hi })
    }

    /// Cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self::new(vec![lo; dim], vec![hi; dim]).expect("cube bounds")
    }

    /// Default parameter box for input dimension `d_prime`: `[-4, 4]^(d'+1)`,
    /// coordinate 0 is the output weight.
    pub fn default_theta(d_prime: usize) -> Self {
        Self::cube(d_prime + 1, -4.0, 4.0)
    }

    /// Default data box for input dimension `d_prime`:
    /// `[-1.5, 1.5]^d' x [0, 1]`, the last coordinate being the label.
    pub fn default_z(d_prime: usize) -> Self {
        let mut lo = vec![-1.5; d_prime];
        let mut hi = vec![1.5; d_prime];
        lo.push(0.0);
        hi.push(1.0);
        Self::new(lo, hi).expect("default z box")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    /// Clip `p` into the box in place.
    pub fn project(&self, p: &mut [f64]) {
        debug_assert_eq!(p.len(), self.dim());
        for (v, (&l, &h)) in p.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(l, h);
        }
    }

    pub fn projected(&self, p: &[f64]) -> Vec<f64> {
        let mut q = p.to_vec();
        self.project(&mut q);
        q
    }

    pub fn check_inside(&self, p: &[f64]) -> Result<(), MeasureError> {
        if p.len() != self.dim() {
            return Err(MeasureError::DimensionMismatch {
                expected: self.dim(),
                got: p.len(),
            });
        }
        for (i, (&v, (&l, &h))) in p.iter().zip(self.lo.iter().zip(&self.hi)).enumerate() {
            if v < l || v > h || !v.is_finite() {
                return Err(MeasureError::OutOfBox {
                    coord: i,
                    value: v,
                    lo: l,
                    hi: h,
                });
            }
        }
        Ok(())
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..=h) })
            .collect()
    }
}

/// One network-parameter particle: output weight `a`, input weights `b`,
/// nonnegative mass `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamParticle {
    pub a: f64,
    pub b: Vec<f64>,
    pub alpha: f64,
}

impl ParamParticle {
    pub fn new(a: f64, b: Vec<f64>, alpha: f64) -> Self {
        Self { a, b, alpha }
    }

    /// Flat position `[a, b...]` in the parameter box layout.
    pub fn position(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(1 + self.b.len());
        p.push(self.a);
        p.extend_from_slice(&self.b);
        p
    }

    pub fn set_position(&mut self, p: &[f64]) {
        self.a = p[0];
        self.b.copy_from_slice(&p[1..]);
    }
}

/// Probability measure over the parameter box, represented by weighted
/// particles. Total mass is kept at 1 by every update.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMeasure {
    pub particles: Vec<ParamParticle>,
    pub theta_box: BoxDomain,
}

impl ParamMeasure {
    pub fn new(particles: Vec<ParamParticle>, theta_box: BoxDomain) -> Result<Self, MeasureError> {
        let m = Self {
            particles,
            theta_box,
        };
        m.validate()?;
        Ok(m)
    }

    /// Input dimension d' (length of `b`).
    pub fn input_dim(&self) -> usize {
        self.theta_box.dim() - 1
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        ksum(self.particles.iter().map(|p| p.alpha))
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.particles.is_empty() {
            return Err(MeasureError::Empty("parameter measure"));
        }
        for p in &self.particles {
            if p.alpha < 0.0 || !p.alpha.is_finite() {
                return Err(MeasureError::MassInvariant {
                    what: "particle alpha",
                    value: p.alpha,
                    expected: 0.0,
                    tol: 0.0,
                });
            }
            self.theta_box.check_inside(&p.position())?;
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(MeasureError::MassInvariant {
                what: "total alpha",
                value: total,
                expected: 1.0,
                tol: MASS_TOL,
            });
        }
        Ok(())
    }

    /// Linear interpolation `(1 - tau) self + tau other` as a measure mixture.
    pub fn mix(&self, other: &ParamMeasure, tau: f64) -> ParamMeasure {
        let mut particles = Vec::with_capacity(self.len() + other.len());
        for p in &self.particles {
            particles.push(ParamParticle::new(p.a, p.b.clone(), (1.0 - tau) * p.alpha));
        }
        for p in &other.particles {
            particles.push(ParamParticle::new(p.a, p.b.clone(), tau * p.alpha));
        }
        ParamMeasure {
            particles,
            theta_box: self.theta_box.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), MeasureError> {
        let d = self.input_dim();
        let mut header = String::from("a");
        for j in 1..=d {
            let _ = write!(header, ",b_{j}");
        }
        header.push_str(",alpha");
        writeln!(w, "{header}")?;
        for p in &self.particles {
            let mut line = format!("{}", p.a);
            for v in &p.b {
                let _ = write!(line, ",{v}");
            }
            let _ = write!(line, ",{}", p.alpha);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, theta_box: BoxDomain) -> Result<Self, MeasureError> {
        let d = theta_box.dim() - 1;
        let mut particles = Vec::new();
        for (row, line) in r.lines().enumerate() {
            let line = line?;
            if row == 0 {
                continue; // header is mandatory
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(MeasureError::Csv {
                    row,
                    column: fields.len(),
                    message: format!("expected {} fields", d + 2),
                });
            }
            let parse = |col: usize| -> Result<f64, MeasureError> {
                fields[col].trim().parse::<f64>().map_err(|e| MeasureError::Csv {
                    row,
                    column: col,
                    message: e.to_string(),
                })
            };
            let a = parse(0)?;
            let b = (1..=d).map(parse).collect::<Result<Vec<_>, _>>()?;
            let alpha = parse(d + 1)?;
            particles.push(ParamParticle::new(a, b, alpha));
        }
        ParamMeasure::new(particles, theta_box)
    }
}

/// One attack particle: a proposed replacement data point with its mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Attack {
    pub z: Vec<f64>,
    pub omega: f64,
}

/// All attack particles attached to one frozen data point. The group mass
/// never changes; weight updates renormalize back to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackGroup {
    anchor: Vec<f64>,
    pub attacks: Vec<Attack>,
    group_mass: f64,
}

impl AttackGroup {
    pub fn new(anchor: Vec<f64>, attacks: Vec<Attack>, group_mass: f64) -> Self {
        Self {
            anchor,
            attacks,
            group_mass,
        }
    }

    /// The frozen data point this group is attached to.
    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn group_mass(&self) -> f64 {
        self.group_mass
    }

    pub fn attack_mass(&self) -> f64 {
        ksum(self.attacks.iter().map(|a| a.omega))
    }

    pub fn mass_residual(&self) -> f64 {
        (self.attack_mass() - self.group_mass).abs()
    }
}

/// Coupling on the data space: first coordinate frozen at the data points,
/// second coordinate carrying the adversary's attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMeasure {
    pub groups: Vec<AttackGroup>,
    pub z_box: BoxDomain,
}

impl CouplingMeasure {
    pub fn new(groups: Vec<AttackGroup>, z_box: BoxDomain) -> Result<Self, MeasureError> {
        let m = Self { groups, z_box };
        m.validate()?;
        Ok(m)
    }

    /// Data-space dimension d'+1.
    pub fn z_dim(&self) -> usize {
        self.z_box.dim()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_attacks(&self) -> usize {
        self.groups.iter().map(|g| g.attacks.len()).sum()
    }

    pub fn total_mass(&self) -> f64 {
        ksum(self.groups.iter().map(|g| g.group_mass))
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.groups.is_empty() {
            return Err(MeasureError::Empty("coupling measure"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.group_mass <= 0.0 {
                return Err(MeasureError::ZeroMassGroup {
                    group: i,
                    mass: g.group_mass,
                });
            }
            self.z_box.check_inside(&g.anchor)?;
            for a in &g.attacks {
                if a.omega < 0.0 || !a.omega.is_finite() {
                    return Err(MeasureError::MassInvariant {
                        what: "attack omega",
                        value: a.omega,
                        expected: 0.0,
                        tol: 0.0,
                    });
                }
                self.z_box.check_inside(&a.z)?;
            }
            if g.mass_residual() > MASS_TOL {
                return Err(MeasureError::MassInvariant {
                    what: "group mass",
                    value: g.attack_mass(),
                    expected: g.group_mass,
                    tol: MASS_TOL,
                });
            }
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(MeasureError::MassInvariant {
                what: "total coupling mass",
                value: total,
                expected: 1.0,
                tol: MASS_TOL,
            });
        }
        Ok(())
    }

    /// First marginal: the anchor points with their group masses. Equals the
    /// empirical data measure by construction.
    pub fn marginal_z(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let points = self.groups.iter().map(|g| g.anchor.clone()).collect();
        let masses = self.groups.iter().map(|g| g.group_mass).collect();
        (points, masses)
    }

    /// Conditional distribution of attacks given the anchor of `group_index`:
    /// attack weights normalized by the group mass.
    pub fn conditional(&self, group_index: usize) -> Result<Vec<f64>, MeasureError> {
        let g = &self.groups[group_index];
        if g.group_mass <= 0.0 {
            return Err(MeasureError::ZeroMassGroup {
                group: group_index,
                mass: g.group_mass,
            });
        }
        Ok(g.attacks.iter().map(|a| a.omega / g.group_mass).collect())
    }

    /// Linear interpolation `(1 - tau) self + tau other`. Both couplings must
    /// share anchors and group masses (the frozen marginal), so the mixture
    /// is formed group by group.
    pub fn mix(&self, other: &CouplingMeasure, tau: f64) -> Result<CouplingMeasure, MeasureError> {
        if self.n_groups() != other.n_groups() {
            return Err(MeasureError::DimensionMismatch {
                expected: self.n_groups(),
                got: other.n_groups(),
            });
        }
        let mut groups = Vec::with_capacity(self.n_groups());
        for (i, (ga, gb)) in self.groups.iter().zip(&other.groups).enumerate() {
            if ga.anchor != gb.anchor {
                return Err(MeasureError::AnchorMismatch { group: i });
            }
            let mut attacks = Vec::with_capacity(ga.attacks.len() + gb.attacks.len());
            attacks.extend(ga.attacks.iter().map(|a| Attack {
                z: a.z.clone(),
                omega: (1.0 - tau) * a.omega,
            }));
            attacks.extend(gb.attacks.iter().map(|a| Attack {
                z: a.z.clone(),
                omega: tau * a.omega,
            }));
            groups.push(AttackGroup::new(ga.anchor.clone(), attacks, ga.group_mass));
        }
        Ok(CouplingMeasure {
            groups,
            z_box: self.z_box.clone(),
        })
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), MeasureError> {
        let d = self.z_dim();
        let mut header = String::from("group_id");
        for j in 1..=d {
            let _ = write!(header, ",anchor_{j}");
        }
        for j in 1..=d {
            let _ = write!(header, ",attack_{j}");
        }
        header.push_str(",omega");
        writeln!(w, "{header}")?;
        for (i, g) in self.groups.iter().enumerate() {
            for a in &g.attacks {
                let mut line = format!("{i}");
                for v in &g.anchor {
                    let _ = write!(line, ",{v}");
                }
                for v in &a.z {
                    let _ = write!(line, ",{v}");
                }
                let _ = write!(line, ",{}", a.omega);
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, z_box: BoxDomain) -> Result<Self, MeasureError> {
        let d = z_box.dim();
        let mut groups: Vec<AttackGroup> = Vec::new();
        for (row, line) in r.lines().enumerate() {
            let line = line?;
            if row == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 * d + 2 {
                return Err(MeasureError::Csv {
                    row,
                    column: fields.len(),
                    message: format!("expected {} fields", 2 * d + 2),
                });
            }
            let parse = |col: usize| -> Result<f64, MeasureError> {
                fields[col].trim().parse::<f64>().map_err(|e| MeasureError::Csv {
                    row,
                    column: col,
                    message: e.to_string(),
                })
            };
            let gid: usize = fields[0].trim().parse().map_err(|_| MeasureError::Csv {
                row,
                column: 0,
                message: "bad group id".into(),
            })?;
            let anchor = (1..=d).map(parse).collect::<Result<Vec<_>, _>>()?;
            let z = (d + 1..=2 * d).map(parse).collect::<Result<Vec<_>, _>>()?;
            let omega = parse(2 * d + 1)?;
            if gid == groups.len() {
                groups.push(AttackGroup::new(anchor, Vec::new(), 0.0));
            } else if gid > groups.len() {
                return Err(MeasureError::Csv {
                    row,
                    column: 0,
                    message: "group ids must be contiguous".into(),
                });
            }
            let g = &mut groups[gid];
            g.attacks.push(Attack { z, omega });
            g.group_mass += omega;
        }
        CouplingMeasure::new(groups, z_box)
    }
}

/// Conservation diagnostics for a coupling/parameter measure pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassResiduals {
    /// `max_i |sum_j omega_ij - group_mass_i|`
    pub per_group_max: f64,
    /// `|sum_i group_mass_i - 1|`
    pub pi_total: f64,
    /// `|sum_k alpha_k - 1|`
    pub nu_total: f64,
}

impl MassResiduals {
    pub fn max(&self) -> f64 {
        self.per_group_max.max(self.pi_total).max(self.nu_total)
    }
}

pub fn mass_residuals(pi: &CouplingMeasure, nu: &ParamMeasure) -> MassResiduals {
    let per_group_max = pi
        .groups
        .iter()
        .map(|g| g.mass_residual())
        .fold(0.0, f64::max);
    MassResiduals {
        per_group_max,
        pi_total: (pi.total_mass() - 1.0).abs(),
        nu_total: (nu.total_mass() - 1.0).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn z_box_1d() -> BoxDomain {
        BoxDomain::default_z(1)
    }

    fn single_group(anchor: Vec<f64>, attacks: Vec<(Vec<f64>, f64)>, mass: f64) -> AttackGroup {
        AttackGroup::new(
            anchor,
            attacks.into_iter().map(|(z, omega)| Attack { z, omega }).collect(),
            mass,
        )
    }

    #[test]
    fn marginal_single_atom() {
        let pi = CouplingMeasure::new(
            vec![single_group(vec![0.0, 0.0], vec![(vec![0.0, 0.0], 1.0)], 1.0)],
            z_box_1d(),
        )
        .unwrap();
        let (points, masses) = pi.marginal_z();
        assert_eq!(points, vec![vec![0.0, 0.0]]);
        assert_eq!(masses, vec![1.0]);
    }

    #[test]
    fn marginal_two_groups_uniform() {
        let z1 = vec![0.5, 0.2];
        let z2 = vec![-0.5, 0.8];
        let pi = CouplingMeasure::new(
            vec![
                single_group(z1.clone(), vec![(z1.clone(), 0.5)], 0.5),
                single_group(z2.clone(), vec![(z2.clone(), 0.5)], 0.5),
            ],
            z_box_1d(),
        )
        .unwrap();
        let (points, masses) = pi.marginal_z();
        assert_eq!(points, vec![z1, z2]);
        assert_eq!(masses, vec![0.5, 0.5]);
    }

    #[test]
    fn marginal_32_groups_sums_to_one() {
        let n = 32;
        let groups: Vec<AttackGroup> = (0..n)
            .map(|i| {
                let x = -1.0 + 2.0 * (i as f64) / (n as f64 - 1.0);
                let anchor = vec![x, 0.5];
                single_group(anchor.clone(), vec![(anchor, 1.0 / n as f64)], 1.0 / n as f64)
            })
            .collect();
        let pi = CouplingMeasure::new(groups, z_box_1d()).unwrap();
        let (_, masses) = pi.marginal_z();
        // independent oracle: direct summation
        let direct: f64 = masses.iter().sum();
        assert!((direct - 1.0).abs() < 1e-12);
        assert!(masses.iter().all(|&m| (m - 1.0 / 32.0).abs() < 1e-15));
    }

    #[test]
    fn conditional_uniform_and_normalized() {
        let anchor = vec![0.0, 0.5];
        let attacks: Vec<(Vec<f64>, f64)> = (0..4).map(|_| (anchor.clone(), 0.25)).collect();
        let pi = CouplingMeasure::new(vec![single_group(anchor, attacks, 1.0)], z_box_1d()).unwrap();
        let c = pi.conditional(0).unwrap();
        assert_eq!(c, vec![0.25; 4]);
    }

    #[test]
    fn conditional_direct_normalization() {
        let anchor = vec![0.0, 0.5];
        let pi = CouplingMeasure::new(
            vec![
                single_group(
                    anchor.clone(),
                    vec![(anchor.clone(), 0.3), (anchor.clone(), 0.1)],
                    0.4,
                ),
                single_group(vec![1.0, 0.5], vec![(vec![1.0, 0.5], 0.6)], 0.6),
            ],
            z_box_1d(),
        )
        .unwrap();
        let c = pi.conditional(0).unwrap();
        assert!((c[0] - 0.75).abs() < 1e-15);
        assert!((c[1] - 0.25).abs() < 1e-15);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_after_exp_update_matches_hand_formula() {
        // Three attacks reweighted by exp(s*kappa*u); hand-recompute the
        // normalized weights and compare with conditional().
        let anchor = vec![0.0, 0.5];
        let u = [0.7f64, -0.2, 0.1];
        let s_kappa = 0.025;
        let raw: Vec<f64> = u.iter().map(|&ui| (1.0 / 3.0) * (s_kappa * ui).exp()).collect();
        let total: f64 = raw.iter().sum();
        let omegas: Vec<f64> = raw.iter().map(|&r| 0.4 * r / total).collect();
        let attacks: Vec<(Vec<f64>, f64)> =
            omegas.iter().map(|&o| (anchor.clone(), o)).collect();
        let pi = CouplingMeasure::new(
            vec![
                single_group(anchor.clone(), attacks, 0.4),
                single_group(vec![1.0, 0.5], vec![(vec![1.0, 0.5], 0.6)], 0.6),
            ],
            z_box_1d(),
        )
        .unwrap();
        let c = pi.conditional(0).unwrap();
        for (ci, ri) in c.iter().zip(&raw) {
            assert!((ci - ri / total).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_group_is_rejected() {
        let anchor = vec![0.0, 0.5];
        let g = single_group(anchor, vec![], 0.0);
        let pi = CouplingMeasure {
            groups: vec![g],
            z_box: z_box_1d(),
        };
        assert!(matches!(
            pi.conditional(0),
            Err(MeasureError::ZeroMassGroup { group: 0, .. })
        ));
    }

    #[test]
    fn residuals_zero_for_fresh_measures() {
        let anchor = vec![0.0, 0.5];
        let pi = CouplingMeasure::new(
            vec![single_group(anchor.clone(), vec![(anchor, 1.0)], 1.0)],
            z_box_1d(),
        )
        .unwrap();
        let nu = ParamMeasure::new(
            vec![ParamParticle::new(1.0, vec![0.0], 1.0)],
            BoxDomain::default_theta(1),
        )
        .unwrap();
        let r = mass_residuals(&pi, &nu);
        assert!(r.max() < 1e-15);
    }

    #[test]
    fn residual_equals_injected_perturbation() {
        let anchor = vec![0.0, 0.5];
        let mut pi = CouplingMeasure::new(
            vec![single_group(
                anchor.clone(),
                vec![(anchor.clone(), 0.5), (anchor, 0.5)],
                1.0,
            )],
            z_box_1d(),
        )
        .unwrap();
        let bump = 3e-4;
        pi.groups[0].attacks[1].omega += bump;
        let nu = ParamMeasure::new(
            vec![ParamParticle::new(1.0, vec![0.0], 1.0)],
            BoxDomain::default_theta(1),
        )
        .unwrap();
        let r = mass_residuals(&pi, &nu);
        assert!((r.per_group_max - bump).abs() < 1e-15);
    }

    #[test]
    fn param_csv_round_trip() {
        let nu = ParamMeasure::new(
            vec![
                ParamParticle::new(1.25, vec![-0.5, 2.0], 0.25),
                ParamParticle::new(-0.125, vec![0.3333333333333333, -1.0], 0.75),
            ],
            BoxDomain::default_theta(2),
        )
        .unwrap();
        let mut buf = Vec::new();
        nu.write_csv(&mut buf).unwrap();
        let back = ParamMeasure::read_csv(&buf[..], BoxDomain::default_theta(2)).unwrap();
        assert_eq!(nu, back);
    }

    #[test]
    fn coupling_csv_round_trip() {
        let anchor = vec![0.25, 0.5];
        let pi = CouplingMeasure::new(
            vec![
                single_group(
                    anchor.clone(),
                    vec![(vec![0.5, 0.5], 0.3), (vec![-0.5, 0.25], 0.2)],
                    0.5,
                ),
                single_group(vec![1.0, 0.75], vec![(vec![1.0, 0.75], 0.5)], 0.5),
            ],
            z_box_1d(),
        )
        .unwrap();
        let mut buf = Vec::new();
        pi.write_csv(&mut buf).unwrap();
        let back = CouplingMeasure::read_csv(&buf[..], z_box_1d()).unwrap();
        assert_eq!(pi.n_groups(), back.n_groups());
        for (a, b) in pi.groups.iter().zip(&back.groups) {
            assert_eq!(a.anchor(), b.anchor());
            assert_eq!(a.attacks, b.attacks);
            assert!((a.group_mass() - b.group_mass()).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(p in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let b = BoxDomain::new(vec![-1.5, -1.5, 0.0], vec![1.5, 1.5, 1.0]).unwrap();
            let once = b.projected(&p);
            let twice = b.projected(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn projection_lands_inside(p in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let b = BoxDomain::new(vec![-1.5, -1.5, 0.0], vec![1.5, 1.5, 1.0]).unwrap();
            prop_assert!(b.contains(&b.projected(&p)));
        }
    }
}
