// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Histogram estimates of the joint density `rho(x, y, tau; t)` and of the
//! thought marginal `rho(x; t)`.
//!
//! Grids keep integer counts. Densities are derived on demand by dividing by
//! `N` times the cell measure, so partial grids built by different workers
//! merge exactly and the result never depends on how particles were split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, TimeOrigin, Vec3, MAX_DIM};
use crate::sim::EnsembleSnapshot;

const CHUNK: usize = 1 << 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("invalid grid configuration: {0}")]
    BadConfig(String),
    #[error("particle {particle} has tau {tau} beyond tau_max {tau_max}")]
    TauOverflow { particle: usize, tau: f64, tau_max: f64 },
    #[error("particle {0} lies outside the domain box")]
    OutsideDomain(usize),
    #[error("grids are incompatible: {0}")]
    Incompatible(String),
}

/// Uniform bins on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self, DensityError> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(DensityError::BadConfig(format!(
                "axis [{lo}, {hi}] with {bins} bins"
            )));
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width()
    }

    /// Bin containing `u`; the upper edge belongs to the last bin.
    pub fn index(&self, u: f64) -> Option<usize> {
        if !(u >= self.lo && u <= self.hi) {
            return None;
        }
        let i = ((u - self.lo) / self.width()).floor() as usize;
        Some(i.min(self.bins - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Bins per thought-space axis.
    pub x_bins: Vec<usize>,
    pub tau_bins: usize,
    /// Upper edge of the elapsed-time axis; defaults to `t - t_start`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<f64>,
}

impl GridConfig {
    pub fn uniform(dim: usize, x_bins: usize, tau_bins: usize) -> Self {
        Self {
            x_bins: vec![x_bins; dim],
            tau_bins,
            tau_max: None,
        }
    }
}

/// Thought-space cells: a row-major product of uniform axes, last axis
/// fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XGrid {
    pub axes: Vec<Axis>,
}

impl XGrid {
    pub fn from_spec(spec: &ModelSpec, bins: &[usize]) -> Result<Self, DensityError> {
        if bins.len() != spec.dim {
            return Err(DensityError::BadConfig(format!(
                "{} x-bin counts for a {}-dimensional domain",
                bins.len(),
                spec.dim
            )));
        }
        let axes = (0..spec.dim)
            .map(|k| Axis::new(spec.domain.lo[k], spec.domain.hi[k], bins[k]))
            .collect::<Result<_, _>>()?;
        Ok(Self { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.bins).product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::width).product()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.bins + i)
    }

    pub fn multi(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.axes[k].bins;
            flat /= self.axes[k].bins;
        }
        idx
    }

    pub fn center(&self, flat: usize) -> Vec3 {
        let idx = self.multi(flat);
        let mut c = [0.0; MAX_DIM];
        for (k, a) in self.axes.iter().enumerate() {
            c[k] = a.center(idx[k]);
        }
        c
    }

    pub fn locate(&self, x: &Vec3) -> Option<usize> {
        let mut flat = 0;
        for (k, a) in self.axes.iter().enumerate() {
            flat = flat * a.bins + a.index(x[k])?;
        }
        Some(flat)
    }

    /// True when the cell touches the outer ring of the grid.
    pub fn on_boundary(&self, flat: usize) -> bool {
        let idx = self.multi(flat);
        self.axes
            .iter()
            .enumerate()
            .any(|(k, a)| idx[k] == 0 || idx[k] + 1 == a.bins)
    }

    /// Neighbour along axis `k` shifted by `delta`, wrapping when `periodic`.
    pub fn neighbour(&self, flat: usize, k: usize, delta: isize, periodic: bool) -> Option<usize> {
        let mut idx = self.multi(flat);
        let n = self.axes[k].bins as isize;
        let j = idx[k] as isize + delta;
        let j = if periodic {
            j.rem_euclid(n)
        } else if (0..n).contains(&j) {
            j
        } else {
            return None;
        };
        idx[k] = j as usize;
        Some(self.flat(&idx[..self.dim()]))
    }
}

/// Histogram of `rho(x, y, tau; t)` with a separate bin for the atom at
/// `tau = t - t_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x: XGrid,
    pub n_y: usize,
    pub tau_axis: Axis,
    pub t: f64,
    pub t_start: f64,
    pub n: u64,
    /// Whether never-jumped particles go to the atom bin (jump-at-zero mode)
    /// or to the continuous `tau` bins (stationary mode).
    pub separate_atom: bool,
    joint: Vec<u64>,
    atom: Vec<u64>,
    x_counts: Vec<u64>,
}

impl DensityGrid {
    fn joint_index(&self, cell: usize, y: usize, ti: usize) -> usize {
        (cell * self.n_y + y) * self.tau_axis.bins + ti
    }

    pub fn joint_count(&self, cell: usize, y: usize, ti: usize) -> u64 {
        self.joint[self.joint_index(cell, y, ti)]
    }

    pub fn atom_count(&self, cell: usize, y: usize) -> u64 {
        self.atom[cell * self.n_y + y]
    }

    pub fn x_count(&self, cell: usize) -> u64 {
        self.x_counts[cell]
    }

    /// Joint count of `(cell, y)` over all `tau`, atom included.
    pub fn xy_count(&self, cell: usize, y: usize) -> u64 {
        let base = self.joint_index(cell, y, 0);
        self.joint[base..base + self.tau_axis.bins].iter().sum::<u64>() + self.atom_count(cell, y)
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    /// Density w.r.t. Lebesgue in `x` and `tau`, counting in `y`.
    pub fn density(&self, cell: usize, y: usize, ti: usize) -> f64 {
        self.joint_count(cell, y, ti) as f64
            / (self.nf() * self.x.cell_volume() * self.tau_axis.width())
    }

    /// Binomial standard error of [`Self::density`].
    pub fn density_se(&self, cell: usize, y: usize, ti: usize) -> f64 {
        let p = self.joint_count(cell, y, ti) as f64 / self.nf();
        crate::stats::proportion_se(p, self.n) / (self.x.cell_volume() * self.tau_axis.width())
    }

    /// Raw fraction of the ensemble in the atom bin of `(cell, y)`.
    pub fn atom_mass(&self, cell: usize, y: usize) -> f64 {
        self.atom_count(cell, y) as f64 / self.nf()
    }

    /// The atom mass of `(cell, y)` as a density in `x`.
    pub fn atom_density(&self, cell: usize, y: usize) -> f64 {
        self.atom_mass(cell, y) / self.x.cell_volume()
    }

    pub fn atom_density_se(&self, cell: usize, y: usize) -> f64 {
        crate::stats::proportion_se(self.atom_mass(cell, y), self.n) / self.x.cell_volume()
    }

    /// Total fraction of never-jumped particles.
    pub fn total_atom_mass(&self) -> f64 {
        self.atom.iter().sum::<u64>() as f64 / self.nf()
    }

    /// `rho(x, y; t)` on the cell.
    pub fn xy_density(&self, cell: usize, y: usize) -> f64 {
        self.xy_count(cell, y) as f64 / (self.nf() * self.x.cell_volume())
    }

    /// Stored thought marginal `rho(x; t)`.
    pub fn x_marginal(&self) -> Vec<f64> {
        let scale = self.nf() * self.x.cell_volume();
        self.x_counts.iter().map(|&c| c as f64 / scale).collect()
    }

    /// Thought marginal obtained by integrating the joint density over `y`
    /// and `tau` and adding the atom.
    pub fn x_marginal_from_joint(&self) -> Vec<f64> {
        let dtau = self.tau_axis.width();
        (0..self.x.cells())
            .map(|c| {
                (0..self.n_y)
                    .map(|y| {
                        (0..self.tau_axis.bins)
                            .map(|ti| self.density(c, y, ti) * dtau)
                            .sum::<f64>()
                            + self.atom_density(c, y)
                    })
                    .sum()
            })
            .collect()
    }

    /// Integral of the estimate: continuous part plus atom mass.
    pub fn total_mass(&self) -> f64 {
        let cell = self.x.cell_volume() * self.tau_axis.width();
        let mut total = 0.0;
        for c in 0..self.x.cells() {
            for y in 0..self.n_y {
                for ti in 0..self.tau_axis.bins {
                    total += self.density(c, y, ti) * cell;
                }
                total += self.atom_mass(c, y);
            }
        }
        total
    }

    pub fn to_marginal(&self) -> XMarginal {
        XMarginal {
            x: self.x.clone(),
            t: self.t,
            n: self.n,
            counts: self.x_counts.clone(),
        }
    }
}

/// Counts partial grids over chunks of particles and adds them together.
fn parallel_counts<F>(size: usize, snapshot: &EnsembleSnapshot, bin: F) -> Result<Vec<u64>, DensityError>
where
    F: Fn(usize, &crate::sim::ParticleState, &mut [u64]) -> Result<(), DensityError> + Sync,
{
    snapshot
        .particles
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(chunk, ps)| {
            let mut counts = vec![0u64; size];
            for (j, p) in ps.iter().enumerate() {
                bin(chunk * CHUNK + j, p, &mut counts)?;
            }
            Ok(counts)
        })
        .try_reduce(
            || vec![0u64; size],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(a)
            },
        )
}

/// Histogram estimate of `rho(x, y, tau; t)` from an ensemble.
pub fn estimate_density(
    spec: &ModelSpec,
    snapshot: &EnsembleSnapshot,
    cfg: &GridConfig,
) -> Result<DensityGrid, DensityError> {
    if snapshot.is_empty() {
        return Err(DensityError::EmptyEnsemble);
    }
    let x = XGrid::from_spec(spec, &cfg.x_bins)?;
    let elapsed = snapshot.t - snapshot.t_start;
    let tau_max = cfg
        .tau_max
        .unwrap_or(if elapsed > 0.0 { elapsed } else { 1.0 });
    let tau_axis = Axis::new(0.0, tau_max, cfg.tau_bins)?;
    let n_y = spec.cognitive_size;
    let separate_atom = snapshot.time_origin == TimeOrigin::JumpAtZero;
    let cells = x.cells();
    let joint_len = cells * n_y * cfg.tau_bins;
    let atom_len = cells * n_y;
    // Layout of one partial buffer: joint, atom, x marginal.
    let size = joint_len + atom_len + cells;
    let counts = parallel_counts(size, snapshot, |i, p, buf| {
        let cell = x.locate(&p.x.coords).ok_or(DensityError::OutsideDomain(i))?;
        let y = p.y.0;
        buf[joint_len + atom_len + cell] += 1;
        if separate_atom && snapshot.is_atom(p) {
            buf[joint_len + cell * n_y + y] += 1;
            return Ok(());
        }
        let ti = tau_axis.index(p.tau).ok_or(DensityError::TauOverflow {
            particle: i,
            tau: p.tau,
            tau_max,
        })?;
        buf[(cell * n_y + y) * cfg.tau_bins + ti] += 1;
        Ok(())
    })?;
    let x_counts = counts[joint_len + atom_len..].to_vec();
    let atom = counts[joint_len..joint_len + atom_len].to_vec();
    let mut joint = counts;
    joint.truncate(joint_len);
    Ok(DensityGrid {
        x,
        n_y,
        tau_axis,
        t: snapshot.t,
        t_start: snapshot.t_start,
        n: snapshot.len() as u64,
        separate_atom,
        joint,
        atom,
        x_counts,
    })
}

/// Histogram of the thought marginal alone; cheaper than a full grid and
/// what the density history stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XMarginal {
    pub x: XGrid,
    pub t: f64,
    pub n: u64,
    pub counts: Vec<u64>,
}

impl XMarginal {
    pub fn estimate(
        spec: &ModelSpec,
        snapshot: &EnsembleSnapshot,
        x_bins: &[usize],
    ) -> Result<Self, DensityError> {
        if snapshot.is_empty() {
            return Err(DensityError::EmptyEnsemble);
        }
        let x = XGrid::from_spec(spec, x_bins)?;
        let counts = parallel_counts(x.cells(), snapshot, |i, p, buf| {
            let cell = x.locate(&p.x.coords).ok_or(DensityError::OutsideDomain(i))?;
            buf[cell] += 1;
            Ok(())
        })?;
        Ok(Self {
            x,
            t: snapshot.t,
            n: snapshot.len() as u64,
            counts,
        })
    }

    pub fn density(&self, cell: usize) -> f64 {
        self.counts[cell] as f64 / (self.n as f64 * self.x.cell_volume())
    }

    pub fn density_se(&self, cell: usize) -> f64 {
        let p = self.counts[cell] as f64 / self.n as f64;
        crate::stats::proportion_se(p, self.n) / self.x.cell_volume()
    }

    /// Multilinear interpolation between cell centers, constant beyond the
    /// outermost centers. Returns the value and its propagated standard
    /// error, or `None` outside the domain box.
    pub fn interpolate(&self, point: &Vec3) -> Option<(f64, f64)> {
        let d = self.x.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for (k, a) in self.x.axes.iter().enumerate() {
            let u = point[k];
            if !(u >= a.lo && u <= a.hi) {
                return None;
            }
            if a.bins == 1 {
                continue;
            }
            let s = (u - a.lo) / a.width() - 0.5;
            let i0 = (s.floor().max(0.0) as usize).min(a.bins - 2);
            base[k] = i0;
            frac[k] = (s - i0 as f64).clamp(0.0, 1.0);
        }
        let mut value = 0.0;
        let mut var = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_DIM];
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                let single = self.x.axes[k].bins == 1;
                if up && single {
                    w = 0.0;
                    break;
                }
                idx[k] = base[k] + usize::from(up);
                w *= if single {
                    1.0
                } else if up {
                    frac[k]
                } else {
                    1.0 - frac[k]
                };
            }
            if w == 0.0 {
                continue;
            }
            let cell = self.x.flat(&idx[..d]);
            value += w * self.density(cell);
            var += w * w * self.density_se(cell).powi(2);
        }
        Some((value, var.sqrt()))
    }
}

/// Time-indexed thought marginals, looked up by nearest stored time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DensityHistory {
    pub entries: Vec<XMarginal>,
    /// Maximum distance between a requested and a stored time.
    pub tolerance: f64,
}

impl DensityHistory {
    /// History for marginals stored every `cadence` time units.
    pub fn new(cadence: f64) -> Self {
        Self {
            entries: Vec::new(),
            tolerance: 0.5 * cadence * (1.0 + 1e-9),
        }
    }

    pub fn push(&mut self, marginal: XMarginal) {
        self.entries.push(marginal);
    }

    pub fn lookup(&self, t: f64) -> Option<&XMarginal> {
        self.entries
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .filter(|m| (m.t - t).abs() <= self.tolerance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        BoundaryMode, DomainBox, InitialDensity, TransitionKernel, VelocityField,
    };
    use crate::sim::{sample_initial, simulate_continuous};

    fn spec_1d(lo: f64, hi: f64) -> ModelSpec {
        ModelSpec {
            dim: 1,
            domain: DomainBox {
                lo: vec![lo],
                hi: vec![hi],
            },
            cognitive_size: 2,
            velocity: VelocityField::Constant {
                vectors: vec![vec![0.0], vec![0.0]],
            },
            kernel: TransitionKernel::Uniform,
            lambda: 1.0,
            initial: InitialDensity::UniformBox { lo: None, hi: None },
            time_origin: TimeOrigin::JumpAtZero,
            boundary: BoundaryMode::Strict,
            support_damping: None,
        }
    }

    #[test]
    fn axis_indexing() {
        let a = Axis::new(0.0, 1.0, 10).unwrap();
        assert_eq!(a.index(0.0), Some(0));
        assert_eq!(a.index(1.0), Some(9));
        assert_eq!(a.index(0.35), Some(3));
        assert_eq!(a.index(-0.1), None);
        assert!(Axis::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn single_particle_density() {
        let mut spec = spec_1d(0.0, 1.0);
        spec.initial = InitialDensity::Point { x: vec![0.55] };
        let snap = sample_initial(&spec, 1, 0).unwrap();
        let grid = estimate_density(&spec, &snap, &GridConfig::uniform(1, 10, 4)).unwrap();
        let m = grid.x_marginal();
        for (i, v) in m.iter().enumerate() {
            let expected = if i == 5 { 10.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12, "{i} {v}");
        }
        assert_eq!(grid.total_atom_mass(), 1.0);
    }

    #[test]
    fn normalization_and_marginal_identity() {
        let spec = spec_1d(-1.0, 1.0);
        let snap = sample_initial(&spec, 5000, 4).unwrap();
        let (snap, _) = simulate_continuous(&spec, &snap, 1.0, 0.1).unwrap();
        let grid = estimate_density(&spec, &snap, &GridConfig::uniform(1, 17, 7)).unwrap();
        assert!((grid.total_mass() - 1.0).abs() < 1e-9);
        for (a, b) in grid.x_marginal().iter().zip(grid.x_marginal_from_joint()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_overflow_is_an_error() {
        let spec = spec_1d(-1.0, 1.0);
        let snap = sample_initial(&spec, 100, 4).unwrap();
        let (snap, _) = simulate_continuous(&spec, &snap, 2.0, 0.1).unwrap();
        let cfg = GridConfig {
            x_bins: vec![4],
            tau_bins: 4,
            tau_max: Some(0.1),
        };
        assert!(matches!(
            estimate_density(&spec, &snap, &cfg),
            Err(DensityError::TauOverflow { .. })
        ));
    }

    #[test]
    fn interpolation_of_linear_profile_is_exact_inside() {
        let grid = XGrid {
            axes: vec![Axis::new(0.0, 1.0, 4).unwrap()],
        };
        let m = XMarginal {
            x: grid,
            t: 0.0,
            n: 10,
            counts: vec![1, 2, 3, 4],
        };
        // densities 0.4, 0.8, 1.2, 1.6 at centers 0.125 .. 0.875
        let (v, _) = m.interpolate(&[0.25, 0.0, 0.0]).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        let (v, _) = m.interpolate(&[0.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
        assert!(m.interpolate(&[1.5, 0.0, 0.0]).is_none());
    }

    #[test]
    fn history_lookup_tolerance() {
        let grid = XGrid {
            axes: vec![Axis::new(0.0, 1.0, 2).unwrap()],
        };
        let mut h = DensityHistory::new(0.1);
        for k in 0..3 {
            h.push(XMarginal {
                x: grid.clone(),
                t: k as f64 * 0.1,
                n: 1,
                counts: vec![1, 0],
            });
        }
        assert_eq!(h.lookup(0.14).unwrap().t, 0.1);
        assert!(h.lookup(0.24).is_some());
        assert!(h.lookup(0.26).is_none());
        assert!(h.lookup(0.36).is_none());
    }

    #[test]
    fn grid_cell_helpers_2d() {
        let g = XGrid {
            axes: vec![Axis::new(0.0, 1.0, 3).unwrap(), Axis::new(0.0, 2.0, 4).unwrap()],
        };
        assert_eq!(g.cells(), 12);
        let f = g.flat(&[2, 1]);
        assert_eq!(f, 9);
        assert_eq!(&g.multi(f)[..2], &[2, 1]);
        assert!(g.on_boundary(f));
        assert!(!g.on_boundary(g.flat(&[1, 2])));
        assert_eq!(g.neighbour(f, 0, 1, true), Some(g.flat(&[0, 1])));
        assert_eq!(g.neighbour(f, 0, 1, false), None);
        assert_eq!(g.locate(&[0.5, 1.9, 0.0]), Some(g.flat(&[1, 3])));
    }
}
