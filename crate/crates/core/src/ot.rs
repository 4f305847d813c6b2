//! Empirical 1-Wasserstein distances for the convergence diagnostics.
//!
//! Three routes with different cost/exactness trade-offs: a closed-form 1-d
//! quantile coupling, an exact transport LP solved as min-cost flow on the
//! bipartite support graph, and a sliced estimate over random projections
//! for large supports. The particle-count convergence study compares runs
//! at matched checkpoints with any of them.

use std::collections::BinaryHeap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::measures::{CouplingMeasure, ParamMeasure};
use crate::numerics::{dot, euclid_dist, ksum, Kahan};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("total masses differ: {a} vs {b}")]
    MassMismatch { a: f64, b: f64 },
    #[error("support size {got} exceeds limit {max}")]
    SupportTooLarge { got: usize, max: usize },
    #[error("dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("checkpoint steps differ between runs at index {index}: {a} vs {b}")]
    CheckpointMismatch { index: usize, a: u64, b: u64 },
    #[error("measure is empty")]
    Empty,
    #[error("transport solve left unrouted mass {0}")]
    Unconverged(f64),
}

/// Finite weighted point cloud normalized to total mass one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self, OtError> {
        if points.is_empty() || points.len() != masses.len() {
            return Err(OtError::Empty);
        }
        let dim = points[0].len();
        for p in &points {
            if p.len() != dim {
                return Err(OtError::DimensionMismatch { a: dim, b: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(OtError::Empty);
            }
        }
        let total = ksum(masses.iter().copied());
        if (total - 1.0).abs() > 1e-9 {
            return Err(OtError::MassMismatch { a: total, b: 1.0 });
        }
        Ok(Self { points, masses })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parameter ensemble as a point cloud over the parameter box.
    pub fn from_param(nu: &ParamMeasure) -> Self {
        Self {
            points: nu.particles.iter().map(|p| p.position()).collect(),
            masses: nu.particles.iter().map(|p| p.alpha).collect(),
        }
    }

    /// Coupling as a point cloud on the product space: each attack becomes
    /// the concatenated point `(anchor, attack)`.
    pub fn from_coupling(pi: &CouplingMeasure) -> Self {
        let mut points = Vec::with_capacity(pi.n_attacks());
        let mut masses = Vec::with_capacity(pi.n_attacks());
        for g in &pi.groups {
            for a in &g.attacks {
                let mut z = g.anchor().to_vec();
                z.extend_from_slice(&a.z);
                points.push(z);
                masses.push(a.omega);
            }
        }
        Self { points, masses }
    }

    /// Merge coincident points (bitwise equality), summing masses. Shrinks
    /// the LP graph, in particular after mixtures of diagonal couplings.
    pub fn dedup(&self) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut masses: Vec<f64> = Vec::new();
        for (p, &m) in self.points.iter().zip(&self.masses) {
            let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            match index.entry(key) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    masses[*e.get()] += m;
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(points.len());
                    points.push(p.clone());
                    masses.push(m);
                }
            }
        }
        Self { points, masses }
    }

    fn project(&self, direction: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.points.iter().map(|p| dot(p, direction)).collect(),
            self.masses.clone(),
        )
    }
}

fn check_masses(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(), OtError> {
    let a = ksum(mu.masses.iter().copied());
    let b = ksum(nu.masses.iter().copied());
    if (a - b).abs() > 1e-9 {
        return Err(OtError::MassMismatch { a, b });
    }
    Ok(())
}

/// Exact 1-d W1 through the quantile coupling, computed as the integral of
/// the CDF difference over the merged support.
pub fn w1_exact_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64, OtError> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(OtError::DimensionMismatch {
            a: mu.dim(),
            b: nu.dim(),
        });
    }
    check_masses(mu, nu)?;
    w1_1d_scalars(
        &mu.points.iter().map(|p| p[0]).collect::<Vec<_>>(),
        &mu.masses,
        &nu.points.iter().map(|p| p[0]).collect::<Vec<_>>(),
        &nu.masses,
    )
}

fn w1_1d_scalars(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> Result<f64, OtError> {
    let sort_idx = |xs: &[f64]| {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite points"));
        idx
    };
    let ia = sort_idx(xa);
    let ib = sort_idx(xb);
    let total_a: f64 = ksum(wa.iter().copied());
    let mut p = 0;
    let mut q = 0;
    let mut cdf_a = 0.0f64;
    let mut cdf_b = 0.0f64;
    let mut last_x: Option<f64> = None;
    let mut acc = Kahan::new();
    while p < ia.len() || q < ib.len() {
        let next_x = match (p < ia.len(), q < ib.len()) {
            (true, true) => xa[ia[p]].min(xb[ib[q]]),
            (true, false) => xa[ia[p]],
            (false, true) => xb[ib[q]],
            (false, false) => unreachable!(),
        };
        if let Some(lx) = last_x {
            acc.add((cdf_a - cdf_b).abs() * (next_x - lx));
        }
        while p < ia.len() && xa[ia[p]] == next_x {
            cdf_a += wa[ia[p]] / total_a;
            p += 1;
        }
        while q < ib.len() && xb[ib[q]] == next_x {
            cdf_b += wb[ib[q]] / total_a;
            q += 1;
        }
        last_x = Some(next_x);
    }
    Ok(acc.value())
}

pub const DEFAULT_MAX_SUPPORT: usize = 512;

/// Exact discrete transport with Euclidean ground cost, solved by
/// successive shortest augmenting paths with node potentials on the
/// bipartite support graph.
pub fn w1_exact_lp(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    max_support: usize,
) -> Result<f64, OtError> {
    if mu.dim() != nu.dim() {
        return Err(OtError::DimensionMismatch {
            a: mu.dim(),
            b: nu.dim(),
        });
    }
    check_masses(mu, nu)?;
    let mu = mu.dedup();
    let nu = nu.dedup();
    let n = mu.len();
    let m = nu.len();
    if n > max_support || m > max_support {
        return Err(OtError::SupportTooLarge {
            got: n.max(m),
            max: max_support,
        });
    }

    let cost: Vec<Vec<f64>> = mu
        .points
        .iter()
        .map(|p| nu.points.iter().map(|q| euclid_dist(p, q)).collect())
        .collect();

    // match the demand total to the supply total exactly; the difference is
    // within the mass tolerance checked above
    let supply_total: f64 = ksum(mu.masses.iter().copied());
    let demand_total: f64 = ksum(nu.masses.iter().copied());
    let rescale = supply_total / demand_total;
    let mut supply = mu.masses.clone();
    let mut demand: Vec<f64> = nu.masses.iter().map(|w| w * rescale).collect();

    let mut flow = vec![vec![0.0f64; m]; n];
    // node ids: 0..n supplies, n..n+m demands
    let mut pot = vec![0.0f64; n + m];
    const EPS: f64 = 1e-15;

    let mut remaining: f64 = supply_total;
    let max_rounds = 8 * (n + m) + 64;
    let mut rounds = 0;
    while remaining > 1e-12 && rounds < max_rounds {
        rounds += 1;
        // multi-source Dijkstra under reduced costs
        let mut dist = vec![f64::INFINITY; n + m];
        let mut prev: Vec<Option<usize>> = vec![None; n + m];
        let mut done = vec![false; n + m];
        let mut heap: BinaryHeap<(std::cmp::Reverse<OrdF64>, usize)> = BinaryHeap::new();
        for (i, &s) in supply.iter().enumerate() {
            if s > EPS {
                dist[i] = 0.0;
                heap.push((std::cmp::Reverse(OrdF64(0.0)), i));
            }
        }
        let mut target: Option<usize> = None;
        while let Some((std::cmp::Reverse(du), u)) = heap.pop() {
            let du = du.0;
            if done[u] || du > dist[u] {
                continue;
            }
            done[u] = true;
            if u >= n && demand[u - n] > EPS {
                target = Some(u);
                break;
            }
            if u < n {
                // forward arcs to every demand node
                for (j, &c_uj) in cost[u].iter().enumerate() {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = c_uj + pot[u] - pot[v];
                    let nd = du + rc;
                    if nd < dist[v] - 1e-18 {
                        dist[v] = nd;
                        prev[v] = Some(u);
                        heap.push((std::cmp::Reverse(OrdF64(nd)), v));
                    }
                }
            } else {
                // residual arcs back to supplies with positive flow
                let j = u - n;
                for (i, flow_row) in flow.iter().enumerate() {
                    if done[i] || flow_row[j] <= EPS {
                        continue;
                    }
                    let rc = -cost[i][j] + pot[u] - pot[i];
                    let nd = du + rc;
                    if nd < dist[i] - 1e-18 {
                        dist[i] = nd;
                        prev[i] = Some(u);
                        heap.push((std::cmp::Reverse(OrdF64(nd)), i));
                    }
                }
            }
        }
        let Some(t) = target else {
            break; // nothing reachable: only dust remains
        };
        let d_target = dist[t];

        // bottleneck along the augmenting path
        let mut bottleneck = demand[t - n];
        let mut v = t;
        while let Some(u) = prev[v] {
            if u < n {
                // forward arc u -> v has unlimited capacity
            } else {
                bottleneck = bottleneck.min(flow[v][u - n]);
            }
            v = u;
        }
        bottleneck = bottleneck.min(supply[v]);
        if bottleneck <= EPS {
            break;
        }

        // apply the augmentation
        let mut v = t;
        while let Some(u) = prev[v] {
            if u < n {
                flow[u][v - n] += bottleneck;
            } else {
                flow[v][u - n] -= bottleneck;
            }
            v = u;
        }
        supply[v] -= bottleneck;
        demand[t - n] -= bottleneck;
        remaining -= bottleneck;

        // cap at the target distance; unreached nodes (infinite dist) take
        // the cap, which keeps every residual reduced cost nonnegative
        for (x, d) in pot.iter_mut().zip(&dist) {
            *x += d.min(d_target);
        }
    }
    if remaining > 1e-9 {
        return Err(OtError::Unconverged(remaining));
    }

    let mut acc = Kahan::new();
    for (flow_row, cost_row) in flow.iter().zip(&cost) {
        for (&f, &c) in flow_row.iter().zip(cost_row) {
            if f > 0.0 {
                acc.add(f * c);
            }
        }
    }
    Ok(acc.value())
}

// BinaryHeap needs Ord; distances are finite by construction.
#[derive(PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.partial_cmp(&other.0).expect("finite distance")
    }
}

/// Sliced W1: average of exact 1-d distances over seeded random unit
/// directions. Scales to supports where the LP is too slow; each projection
/// lower-bounds the true distance.
pub fn w1_sliced(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    n_projections: usize,
    seed: u64,
) -> Result<f64, OtError> {
    if mu.dim() != nu.dim() {
        return Err(OtError::DimensionMismatch {
            a: mu.dim(),
            b: nu.dim(),
        });
    }
    check_masses(mu, nu)?;
    assert!(n_projections >= 1, "need at least one projection");
    let dim = mu.dim();
    let mut rng = stream_rng(seed, "sliced-w1", 0);
    let mut acc = Kahan::new();
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let norm = dot(&dir, &dir).sqrt();
        if norm < 1e-12 {
            dir = vec![0.0; dim];
            dir[0] = 1.0;
        } else {
            for v in dir.iter_mut() {
                *v /= norm;
            }
        }
        let (pa, wa) = mu.project(&dir);
        let (pb, wb) = nu.project(&dir);
        acc.add(w1_1d_scalars(&pa, &wa, &pb, &wb)?);
    }
    Ok(acc.value() / n_projections as f64)
}

/// Distance backend for the convergence study.
#[derive(Clone, Copy, Debug)]
pub enum ChaosMode {
    Exact { max_support: usize },
    Sliced { n_projections: usize, seed: u64 },
}

fn distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure, mode: ChaosMode) -> Result<f64, OtError> {
    match mode {
        ChaosMode::Exact { max_support } => w1_exact_lp(mu, nu, max_support),
        ChaosMode::Sliced {
            n_projections,
            seed,
        } => {
            if mu.dim() == 1 {
                w1_exact_1d(mu, nu)
            } else {
                w1_sliced(mu, nu, n_projections, seed)
            }
        }
    }
}

/// One run checkpoint reduced to point clouds.
#[derive(Clone, Debug)]
pub struct ChaosSnapshot {
    pub step: u64,
    pub nu: DiscreteMeasure,
    pub pi: DiscreteMeasure,
}

impl ChaosSnapshot {
    pub fn from_measures(step: u64, pi: &CouplingMeasure, nu: &ParamMeasure) -> Self {
        Self {
            step,
            nu: DiscreteMeasure::from_param(nu),
            pi: DiscreteMeasure::from_coupling(pi),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChaosRow {
    pub step: u64,
    pub w1_nu: f64,
    pub w1_pi: f64,
    pub running_sup: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ChaosSeries {
    pub rows: Vec<ChaosRow>,
}

impl ChaosSeries {
    pub fn sup(&self) -> f64 {
        self.rows.last().map(|r| r.running_sup).unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), std::io::Error> {
        writeln!(w, "checkpoint_step,w1_nu,w1_pi,running_sup")?;
        for r in &self.rows {
            let mut line = String::new();
            let _ = write!(line, "{},{},{},{}", r.step, r.w1_nu, r.w1_pi, r.running_sup);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Per-checkpoint `W1(nu_a, nu_b) + W1(pi_a, pi_b)` between two aligned
/// runs, together with the running supremum over time.
pub fn chaos_metric(
    run_a: &[ChaosSnapshot],
    run_b: &[ChaosSnapshot],
    mode: ChaosMode,
) -> Result<ChaosSeries, OtError> {
    if run_a.len() != run_b.len() {
        return Err(OtError::CheckpointMismatch {
            index: run_a.len().min(run_b.len()),
            a: run_a.len() as u64,
            b: run_b.len() as u64,
        });
    }
    let mut series = ChaosSeries::default();
    let mut sup: f64 = 0.0;
    for (index, (a, b)) in run_a.iter().zip(run_b).enumerate() {
        if a.step != b.step {
            return Err(OtError::CheckpointMismatch {
                index,
                a: a.step,
                b: b.step,
            });
        }
        let w1_nu = distance(&a.nu, &b.nu, mode)?;
        let w1_pi = distance(&a.pi, &b.pi, mode)?;
        sup = sup.max(w1_nu + w1_pi);
        series.rows.push(ChaosRow {
            step: a.step,
            w1_nu,
            w1_pi,
            running_sup: sup,
        });
    }
    Ok(series)
}
