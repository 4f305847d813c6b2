//! Synthetic dataset generation, CSV ingestion, and the seeded samplers
//! that build initial solver states.
//!
//! Every sampler draws from a per-purpose (and, for attacks, per-anchor)
//! stream with a fixed number of draws per particle, so an ensemble of M
//! particles is always a prefix of the ensemble of M' > M particles built
//! from the same seed. The particle-count convergence study depends on this
//! nesting.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dynamics::SolverState;
use crate::measures::{
    Attack, AttackGroup, BoxDomain, CouplingMeasure, MeasureError, ParamMeasure, ParamParticle,
};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("two-moons point count must be even, got {0}")]
    OddCount(usize),
    #[error("dataset must contain at least one point")]
    EmptyDataset,
    #[error("parse error at row {row}, column {column}: {message}")]
    ParseError {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("row {row} lies outside the configured data box")]
    OutOfBox { row: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A labelled dataset over the data box; inputs have dimension d' and the
/// scalar label is the last coordinate of the full data point.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub z_box: BoxDomain,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.z_box.dim() - 1
    }

    /// Full data point `(x, y)` at index `i`.
    pub fn point(&self, i: usize) -> Vec<f64> {
        let mut z = self.inputs[i].clone();
        z.push(self.labels[i]);
        z
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), DataError> {
        let d = self.input_dim();
        let mut header = String::new();
        for j in 1..=d {
            if j > 1 {
                header.push(',');
            }
            let _ = write!(header, "x_{j}");
        }
        header.push_str(",y");
        writeln!(w, "{header}")?;
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            let mut line = String::new();
            for (j, v) in x.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{v}");
            }
            let _ = write!(line, ",{y}");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Seeded shuffle-and-split into `(train, test)` with `train_frac` of
    /// the points in the first part.
    pub fn split(&self, train_frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream_rng(seed, "split", 0));
        let cut = ((self.len() as f64) * train_frac).round() as usize;
        let take = |ids: &[usize]| Dataset {
            inputs: ids.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            z_box: self.z_box.clone(),
        };
        (take(&idx[..cut]), take(&idx[cut..]))
    }
}

/// Expected CSV layout: columns `x_1..x_d,y` under a mandatory header, with
/// every row inside the box.
#[derive(Clone, Debug)]
pub struct DataSchema {
    pub input_dim: usize,
    pub z_box: BoxDomain,
}

/// Clean regression target on `[-1, 1]`.
pub fn regression_target(x: f64) -> f64 {
    0.5 * (std::f64::consts::PI * x).sin() + 0.5
}

/// 1-d regression set: `x ~ U[-1, 1]`, `y = 0.5 sin(pi x) + 0.5 + noise`,
/// labels clipped to `[0, 1]`.
pub fn gen_regression_1d(n: usize, noise_std: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = stream_rng(seed, "regression1d", 0);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
        inputs.push(vec![x]);
        labels.push((regression_target(x) + noise).clamp(0.0, 1.0));
    }
    Ok(Dataset {
        inputs,
        labels,
        z_box: BoxDomain::default_z(1),
    })
}

/// Two interleaved half-circles in d' = 2 with binary labels, centered at
/// the origin and scaled to sit well inside the data box. Class 0 is the
/// upper arc, class 1 the lower one; exactly n/2 points per class.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    if !n.is_multiple_of(2) {
        return Err(DataError::OddCount(n));
    }
    let half = n / 2;
    let mut rng = stream_rng(seed, "two-moons", 0);
    let z_box = BoxDomain::default_z(2);
    let scale = 0.8;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for cls in 0..2 {
        for i in 0..half {
            let t = std::f64::consts::PI * (i as f64) / ((half - 1).max(1) as f64);
            let (raw_x, raw_y) = if cls == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
            let ny: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
            let x = vec![
                (scale * (raw_x - 0.5) + nx).clamp(z_box.lo()[0], z_box.hi()[0]),
                (scale * (raw_y - 0.25) + ny).clamp(z_box.lo()[1], z_box.hi()[1]),
            ];
            inputs.push(x);
            labels.push(cls as f64);
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        z_box,
    })
}

/// Parse a dataset from CSV, rejecting malformed cells and rows outside the
/// configured box with row-indexed errors.
pub fn load_csv<R: BufRead>(r: R, schema: &DataSchema) -> Result<Dataset, DataError> {
    let d = schema.input_dim;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in r.lines().enumerate() {
        let line = line?;
        if row == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(DataError::ParseError {
                row,
                column: fields.len(),
                message: format!("expected {} fields", d + 1),
            });
        }
        let mut z = Vec::with_capacity(d + 1);
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e: std::num::ParseFloatError| {
                DataError::ParseError {
                    row,
                    column: col,
                    message: e.to_string(),
                }
            })?;
            z.push(v);
        }
        if !schema.z_box.contains(&z) {
            return Err(DataError::OutOfBox { row });
        }
        labels.push(z.pop().expect("label column"));
        inputs.push(z);
    }
    if inputs.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset {
        inputs,
        labels,
        z_box: schema.z_box.clone(),
    })
}

pub fn load_csv_path(path: &Path, schema: &DataSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    load_csv(std::io::BufReader::new(file), schema)
}

/// Initial parameter-particle sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Nu0Spec {
    /// Uniform on the parameter box; strictly positive density everywhere,
    /// which the long-time guarantees assume.
    UniformBox,
    GaussianClipped { mean: f64, std: f64 },
}

/// Initial attack sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pi0Spec {
    /// Every attack starts on its anchor; the adversarial cost is exactly
    /// zero at time zero.
    Diagonal,
    /// Anchor plus isotropic Gaussian noise, clipped into the data box;
    /// gives the conditionals full support.
    ConditionalNoise { std: f64 },
}

#[derive(Clone, Debug)]
pub struct InitSpec {
    pub nu0: Nu0Spec,
    pub pi0: Pi0Spec,
    /// Attacks per anchor (N).
    pub n_attacks: usize,
    /// Parameter particles (M).
    pub m_particles: usize,
    pub seed: u64,
    pub theta_box: BoxDomain,
}

impl InitSpec {
    pub fn new(d_prime: usize) -> Self {
        Self {
            nu0: Nu0Spec::UniformBox,
            pi0: Pi0Spec::Diagonal,
            n_attacks: 8,
            m_particles: 64,
            seed: 0,
            theta_box: BoxDomain::default_theta(d_prime),
        }
    }
}

/// Build the initial solver state: anchors at the data points with uniform
/// group masses 1/n, N equally weighted attacks per anchor, M equally
/// weighted parameter particles, everything clipped into its box.
pub fn init_state(data: &Dataset, spec: &InitSpec) -> Result<SolverState, DataError> {
    if data.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    assert!(spec.n_attacks >= 1, "need at least one attack per anchor");
    assert!(spec.m_particles >= 1, "need at least one parameter particle");
    let n = data.len();
    let group_mass = 1.0 / n as f64;
    let omega = group_mass / spec.n_attacks as f64;

    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let anchor = data.point(i);
        let mut rng = stream_rng(spec.seed, "pi0", i as u64);
        let attacks = (0..spec.n_attacks)
            .map(|_| {
                let z = match spec.pi0 {
                    Pi0Spec::Diagonal => anchor.clone(),
                    Pi0Spec::ConditionalNoise { std } => {
                        let mut z: Vec<f64> = anchor
                            .iter()
                            .map(|&c| c + std * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        data.z_box.project(&mut z);
                        z
                    }
                };
                Attack { z, omega }
            })
            .collect();
        groups.push(AttackGroup::new(anchor, attacks, group_mass));
    }
    let pi = CouplingMeasure::new(groups, data.z_box.clone())?;

    let mut rng = stream_rng(spec.seed, "nu0", 0);
    let alpha = 1.0 / spec.m_particles as f64;
    let particles = (0..spec.m_particles)
        .map(|_| {
            let pos = match spec.nu0 {
                Nu0Spec::UniformBox => spec.theta_box.sample_uniform(&mut rng),
                Nu0Spec::GaussianClipped { mean, std } => {
                    let raw: Vec<f64> = (0..spec.theta_box.dim())
                        .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    spec.theta_box.projected(&raw)
                }
            };
            ParamParticle::new(pos[0], pos[1..].to_vec(), alpha)
        })
        .collect();
    let nu = ParamMeasure::new(particles, spec.theta_box.clone())?;

    Ok(SolverState::new(pi, nu))
}
