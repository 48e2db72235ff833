// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Residual checks of the density evolution laws against Monte Carlo grids.
//!
//! Two laws are checked. The continuity law
//! `d rho(x;t)/dt + div_x sum_y rho(x,y;t) v(x,y) = 0`, and the renewal
//! representation of the joint density
//! `rho(x,y,tau;t) = lambda e^{-lambda tau} rho(x*; t-tau) psi(x*, y) J`,
//! where `x* = x*(tau; x, y)` is the time reversal and `J` the reverse
//! measure ratio. In jump-at-zero mode the never-jumped particles form an
//! atom at `tau = t - t_start` which is checked on its own.
//!
//! Every residual comes with a noise floor: per-cell binomial standard
//! errors pushed linearly through the same stencils. A check passes when
//! `L1 <= k_noise * floor`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{estimate_density, DensityError, DensityGrid, DensityHistory, GridConfig, XGrid};
use crate::flow::{reverse_measure_ratio, FlowError, DEFAULT_H_DIV};
use crate::model::{BoundaryMode, CognitiveIndex, ModelSpec, ThoughtPoint, TimeOrigin, Vec3};
use crate::sim::{EnsembleSnapshot, SimError};
use crate::stats::proportion_se;

/// Default multiple of the noise floor a residual may reach.
pub const DEFAULT_K_NOISE: f64 = 4.0;

/// `|z|` above which a measured atom weight is declared inconsistent with a
/// candidate value.
const ATOM_Z_LIMIT: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("no stored density within tolerance of t = {0}")]
    MissingHistory(f64),
    #[error("tau = {tau} exceeds the elapsed time {elapsed} since the origin")]
    TauBeyondOrigin { tau: f64, elapsed: f64 },
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremId {
    #[serde(rename = "continuity-jump-at-zero")]
    ContinuityJumpAtZero,
    #[serde(rename = "continuity-stationary")]
    ContinuityStationary,
    #[serde(rename = "kernel-jump-at-zero")]
    KernelJumpAtZero,
    #[serde(rename = "kernel-stationary")]
    KernelStationary,
}

impl TheoremId {
    pub fn as_str(self) -> &'static str {
        match self {
            TheoremId::ContinuityJumpAtZero => "continuity-jump-at-zero",
            TheoremId::ContinuityStationary => "continuity-stationary",
            TheoremId::KernelJumpAtZero => "kernel-jump-at-zero",
            TheoremId::KernelStationary => "kernel-stationary",
        }
    }

    pub fn continuity(origin: TimeOrigin) -> Self {
        match origin {
            TimeOrigin::JumpAtZero => TheoremId::ContinuityJumpAtZero,
            TimeOrigin::Stationary => TheoremId::ContinuityStationary,
        }
    }

    pub fn kernel(origin: TimeOrigin) -> Self {
        match origin {
            TimeOrigin::JumpAtZero => TheoremId::KernelJumpAtZero,
            TimeOrigin::Stationary => TheoremId::KernelStationary,
        }
    }
}

/// Everything needed to reproduce a residual evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n: u64,
    pub x_bins: Vec<usize>,
    pub cell_widths: Vec<f64>,
    pub tau_bins: Option<usize>,
    pub tau_max: Option<f64>,
    pub t: f64,
    pub t_start: f64,
    /// Time difference of the forward difference (continuity checks).
    pub dt: Option<f64>,
    /// RK4 step of the reversed flow (kernel checks).
    pub step: Option<f64>,
    /// Spacing of the divergence stencil inside the measure ratio; the ball
    /// limit itself is taken analytically.
    pub h_div: f64,
    pub excluded_outer_ring: bool,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualComponent {
    pub name: String,
    pub l1: f64,
    pub linf: f64,
    pub noise_floor: f64,
    pub cells: usize,
}

/// Measured never-jumped fraction next to the two candidate coefficients of
/// the atom: the total-probability value `e^{-lambda t}` and the printed
/// coefficient `1 - e^{-lambda t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomReport {
    pub elapsed: f64,
    pub lambda: f64,
    pub n: u64,
    pub measured: f64,
    pub measured_se: f64,
    pub total_probability_value: f64,
    pub printed_coefficient: f64,
    /// `(measured - candidate) / sqrt(p (1 - p) / N)` with `p` the candidate.
    pub z_total_probability: f64,
    pub z_printed: f64,
    pub consistent_with_total_probability: bool,
    pub consistent_with_printed: bool,
    pub note: String,
}

impl AtomReport {
    pub fn new(measured: f64, n: u64, lambda: f64, elapsed: f64) -> Self {
        let total = (-lambda * elapsed).exp();
        let printed = 1.0 - total;
        let z = |p: f64| {
            let se = proportion_se(p, n);
            if se > 0.0 {
                (measured - p) / se
            } else if measured == p {
                0.0
            } else {
                f64::INFINITY.copysign(measured - p)
            }
        };
        let z_total = z(total);
        let z_printed = z(printed);
        let ok_total = z_total.abs() <= ATOM_Z_LIMIT;
        let ok_printed = z_printed.abs() <= ATOM_Z_LIMIT;
        let note = match (ok_total, ok_printed) {
            (true, false) => format!(
                "measured atom weight {measured:.6} agrees with e^(-lambda t) = {total:.6} and is \
                 inconsistent with the printed coefficient 1 - e^(-lambda t) = {printed:.6} \
                 (z = {z_printed:.1}); the measured value is used"
            ),
            (true, true) => format!(
                "both candidate coefficients are within {ATOM_Z_LIMIT} standard errors of the \
                 measured weight {measured:.6}; the measured value is used"
            ),
            (false, true) => format!(
                "measured atom weight {measured:.6} agrees with the printed coefficient only; \
                 the measured value is used"
            ),
            (false, false) => format!(
                "measured atom weight {measured:.6} matches neither candidate; the measured value \
                 is used"
            ),
        };
        Self {
            elapsed,
            lambda,
            n,
            measured,
            measured_se: proportion_se(measured, n),
            total_probability_value: total,
            printed_coefficient: printed,
            z_total_probability: z_total,
            z_printed,
            consistent_with_total_probability: ok_total,
            consistent_with_printed: ok_printed,
            note,
        }
    }

    pub fn from_snapshot(spec: &ModelSpec, snapshot: &EnsembleSnapshot) -> Result<Self, VerifyError> {
        let w = crate::sim::atom_weight(snapshot)?;
        Ok(Self::new(
            w,
            snapshot.len() as u64,
            spec.lambda,
            snapshot.t - snapshot.t_start,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub theorem: TheoremId,
    pub l1: f64,
    pub linf: f64,
    /// L1 norm of the per-cell standard errors of the residual.
    pub noise_floor: f64,
    /// Largest per-cell standard error.
    pub noise_floor_linf: f64,
    pub k_noise: f64,
    pub pass: bool,
    pub cells_evaluated: usize,
    pub components: Vec<ResidualComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom: Option<AtomReport>,
    pub metadata: ReportMetadata,
    pub notes: Vec<String>,
}

/// The pass rule shared by every report.
pub fn residual_passes(l1: f64, noise_floor: f64, k_noise: f64) -> bool {
    l1 <= k_noise * noise_floor
}

impl ResidualReport {
    /// Re-derives the pass flag from the stored numbers.
    pub fn evaluate_pass(&self) -> bool {
        residual_passes(self.l1, self.noise_floor, self.k_noise)
    }
}

/// Per-cell accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct CellResidual {
    abs: f64,
    sigma: f64,
    measure: f64,
}

fn summarize(name: &str, cells: &[CellResidual]) -> ResidualComponent {
    let mut l1 = 0.0;
    let mut linf: f64 = 0.0;
    let mut floor = 0.0;
    for c in cells {
        l1 += c.abs * c.measure;
        linf = linf.max(c.abs);
        floor += c.sigma * c.measure;
    }
    ResidualComponent {
        name: name.to_string(),
        l1,
        linf,
        noise_floor: floor,
        cells: cells.len(),
    }
}

fn max_sigma(cells: &[CellResidual]) -> f64 {
    cells.iter().map(|c| c.sigma).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Continuity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityOptions {
    pub k_noise: f64,
}

impl Default for ContinuityOptions {
    fn default() -> Self {
        Self {
            k_noise: DEFAULT_K_NOISE,
        }
    }
}

fn check_compatible(a: &DensityGrid, b: &DensityGrid) -> Result<(), VerifyError> {
    if a.x != b.x || a.n_y != b.n_y {
        return Err(VerifyError::Incompatible("grids do not share axes".into()));
    }
    if !(b.t > a.t) {
        return Err(VerifyError::Incompatible(format!(
            "second grid time {} must exceed first {}",
            b.t, a.t
        )));
    }
    Ok(())
}

/// Flux `F_k = sum_y rho(x,y) v_k(x_center, y)` and its standard error on
/// every cell.
fn flux_field(spec: &ModelSpec, grid: &DensityGrid) -> Vec<(Vec3, Vec3)> {
    let n = grid.n as f64;
    let vol = grid.x.cell_volume();
    (0..grid.x.cells())
        .map(|cell| {
            let c = grid.x.center(cell);
            let mut mean = [0.0; 3];
            let mut second = [0.0; 3];
            for y in 0..grid.n_y {
                let p = grid.xy_count(cell, y) as f64 / n;
                let v = spec.velocity_at(&c, y);
                for k in 0..spec.dim {
                    mean[k] += p * v[k];
                    second[k] += p * v[k] * v[k];
                }
            }
            let mut flux = [0.0; 3];
            let mut se = [0.0; 3];
            for k in 0..spec.dim {
                flux[k] = mean[k] / vol;
                se[k] = ((second[k] - mean[k] * mean[k]).max(0.0) / n).sqrt() / vol;
            }
            (flux, se)
        })
        .collect()
}

fn continuity_core(
    spec: &ModelSpec,
    g1: &DensityGrid,
    g2: &DensityGrid,
    ddt_se: &(dyn Fn(usize) -> f64 + Sync),
    opts: &ContinuityOptions,
) -> Result<ResidualReport, VerifyError> {
    check_compatible(g1, g2)?;
    let dt = g2.t - g1.t;
    let periodic = spec.boundary == BoundaryMode::Periodic;
    let x = &g1.x;
    let flux = flux_field(spec, g1);
    let m1 = g1.x_marginal();
    let m2 = g2.x_marginal();
    let vol = x.cell_volume();
    let cells: Vec<CellResidual> = (0..x.cells())
        .filter(|&c| periodic || !x.on_boundary(c))
        .map(|c| {
            let ddt = (m2[c] - m1[c]) / dt;
            let mut div = 0.0;
            let mut div_var = 0.0;
            for k in 0..x.dim() {
                let h = x.axes[k].width();
                let up = x.neighbour(c, k, 1, periodic).expect("interior cell");
                let dn = x.neighbour(c, k, -1, periodic).expect("interior cell");
                div += (flux[up].0[k] - flux[dn].0[k]) / (2.0 * h);
                div_var += (flux[up].1[k].powi(2) + flux[dn].1[k].powi(2)) / (4.0 * h * h);
            }
            CellResidual {
                abs: (ddt + div).abs(),
                sigma: (ddt_se(c).powi(2) + div_var).sqrt(),
                measure: vol,
            }
        })
        .collect();
    let comp = summarize("interior", &cells);
    let mut notes = Vec::new();
    if !periodic {
        notes.push("outermost cell ring excluded: the central-difference stencil needs both neighbours".into());
    }
    let report = ResidualReport {
        theorem: TheoremId::continuity(spec.time_origin),
        l1: comp.l1,
        linf: comp.linf,
        noise_floor: comp.noise_floor,
        noise_floor_linf: max_sigma(&cells),
        k_noise: opts.k_noise,
        pass: residual_passes(comp.l1, comp.noise_floor, opts.k_noise),
        cells_evaluated: cells.len(),
        components: vec![comp],
        atom: None,
        metadata: ReportMetadata {
            n: g1.n,
            x_bins: x.axes.iter().map(|a| a.bins).collect(),
            cell_widths: x.axes.iter().map(|a| a.width()).collect(),
            tau_bins: None,
            tau_max: None,
            t: g1.t,
            t_start: g1.t_start,
            dt: Some(dt),
            step: None,
            h_div: 0.0,
            excluded_outer_ring: !periodic,
            model_hash: spec.model_hash(),
        },
        notes,
    };
    Ok(report)
}

/// Continuity residual from two independently estimated grids. The time
/// derivative noise treats the two grids as independent samples.
pub fn continuity_residual(
    spec: &ModelSpec,
    grid_t: &DensityGrid,
    grid_t2: &DensityGrid,
    opts: &ContinuityOptions,
) -> Result<ResidualReport, VerifyError> {
    if grid_t.n == 0 || grid_t2.n == 0 {
        return Err(DensityError::EmptyEnsemble.into());
    }
    let dt = grid_t2.t - grid_t.t;
    let (n1, n2) = (grid_t.n, grid_t2.n);
    let vol = grid_t.x.cell_volume();
    let se = |c: usize| {
        let p1 = grid_t.x_count(c) as f64 / n1 as f64;
        let p2 = grid_t2.x_count(c) as f64 / n2 as f64;
        (proportion_se(p1, n1).powi(2) + proportion_se(p2, n2).powi(2)).sqrt() / (vol * dt)
    };
    continuity_core(spec, grid_t, grid_t2, &se, opts)
}

/// Continuity residual for two snapshots of the same particles. The time
/// derivative is a mean of per-particle differences, so its standard error
/// comes from the particles that actually changed cell.
pub fn continuity_residual_paired(
    spec: &ModelSpec,
    snap_t: &EnsembleSnapshot,
    snap_t2: &EnsembleSnapshot,
    x_bins: &[usize],
    opts: &ContinuityOptions,
) -> Result<ResidualReport, VerifyError> {
    if snap_t.len() != snap_t2.len() || snap_t.seed != snap_t2.seed {
        return Err(VerifyError::Incompatible(
            "paired residual needs two snapshots of the same ensemble".into(),
        ));
    }
    let cfg = GridConfig {
        x_bins: x_bins.to_vec(),
        tau_bins: 1,
        tau_max: Some((snap_t2.t - snap_t2.t_start).max(f64::MIN_POSITIVE) * (1.0 + 1e-12)),
    };
    let g1 = estimate_density(spec, snap_t, &cfg)?;
    let g2 = estimate_density(spec, snap_t2, &cfg)?;
    let x = &g1.x;
    let mut moves = vec![0u64; x.cells()];
    for (a, b) in snap_t.particles.iter().zip(&snap_t2.particles) {
        let ca = x.locate(&a.x.coords);
        let cb = x.locate(&b.x.coords);
        if ca != cb {
            if let Some(c) = ca {
                moves[c] += 1;
            }
            if let Some(c) = cb {
                moves[c] += 1;
            }
        }
    }
    let n = snap_t.len() as f64;
    let dt = g2.t - g1.t;
    let vol = x.cell_volume();
    let se = |c: usize| {
        let d = (g2.x_count(c) as f64 - g1.x_count(c) as f64) / n;
        let var = (moves[c] as f64 / n - d * d).max(0.0) / n;
        var.sqrt() / (vol * dt)
    };
    let mut report = continuity_core(spec, &g1, &g2, &se, opts)?;
    report
        .notes
        .push("time-derivative noise from per-particle paired differences".into());
    Ok(report)
}

// ---------------------------------------------------------------------------
// Kernel representation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhsOptions {
    /// RK4 step of the reversed flow.
    pub step: f64,
    pub h_div: f64,
    pub t_start: f64,
}

impl Default for RhsOptions {
    fn default() -> Self {
        Self {
            step: 1e-2,
            h_div: DEFAULT_H_DIV,
            t_start: 0.0,
        }
    }
}

/// Which term of the representation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhsTerm {
    /// Continuous part, coefficient `lambda e^{-lambda tau}`.
    Renewal,
    /// Atom at `tau = t - t_start`; `weight` replaces the renewal factor.
    Atom { weight: f64, weight_se: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhsValue {
    pub value: f64,
    pub std_error: f64,
}

/// Right-hand side of the renewal representation at `(x, y, tau; t)`.
pub fn kernel_rhs(
    spec: &ModelSpec,
    x: ThoughtPoint,
    y: CognitiveIndex,
    tau: f64,
    t: f64,
    history: &DensityHistory,
    opts: &RhsOptions,
) -> Result<f64, VerifyError> {
    kernel_rhs_detailed(spec, x, y, tau, t, history, RhsTerm::Renewal, opts).map(|r| r.value)
}

/// [`kernel_rhs`] with a choice of term and the propagated standard error of
/// the interpolated history density.
#[allow(clippy::too_many_arguments)]
pub fn kernel_rhs_detailed(
    spec: &ModelSpec,
    x: ThoughtPoint,
    y: CognitiveIndex,
    tau: f64,
    t: f64,
    history: &DensityHistory,
    term: RhsTerm,
    opts: &RhsOptions,
) -> Result<RhsValue, VerifyError> {
    let elapsed = t - opts.t_start;
    if spec.time_origin == TimeOrigin::JumpAtZero && tau > elapsed * (1.0 + 1e-12) {
        return Err(VerifyError::TauBeyondOrigin { tau, elapsed });
    }
    let source = history
        .lookup(t - tau)
        .ok_or(VerifyError::MissingHistory(t - tau))?;
    let zero = RhsValue {
        value: 0.0,
        std_error: 0.0,
    };
    let rev = match reverse_measure_ratio(spec, x, y, tau, opts.step, opts.h_div) {
        Ok(r) => r,
        Err(FlowError::DomainExit { .. } | FlowError::StartOutside(_)) => return Ok(zero),
        Err(e) => return Err(e.into()),
    };
    let Some((rho, rho_se)) = source.interpolate(&rev.reversed_point.coords) else {
        return Ok(zero);
    };
    let psi = spec.kernel_prob(&rev.reversed_point.coords, y.0);
    let (coef, coef_se) = match term {
        RhsTerm::Renewal => (spec.lambda * (-spec.lambda * tau).exp(), 0.0),
        RhsTerm::Atom { weight, weight_se } => (weight, weight_se),
    };
    let g = psi * rev.ratio;
    Ok(RhsValue {
        value: coef * rho * g,
        std_error: g * ((coef * rho_se).powi(2) + (coef_se * rho).powi(2)).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckConfig {
    pub grid: GridConfig,
    pub k_noise: f64,
    pub step: f64,
    pub h_div: f64,
}

fn rhs_options(snapshot: &EnsembleSnapshot, cfg: &KernelCheckConfig) -> RhsOptions {
    RhsOptions {
        step: cfg.step,
        h_div: cfg.h_div,
        t_start: snapshot.t_start,
    }
}

/// Compares the empirical joint density of `snapshot` with the renewal
/// representation evaluated at cell centers. Interior thought cells only.
pub fn kernel_equation_check(
    spec: &ModelSpec,
    history: &DensityHistory,
    snapshot: &EnsembleSnapshot,
    cfg: &KernelCheckConfig,
) -> Result<ResidualReport, VerifyError> {
    let grid = estimate_density(spec, snapshot, &cfg.grid)?;
    if let Some(first) = history.entries.first() {
        if first.x != grid.x {
            return Err(VerifyError::Incompatible(
                "history and snapshot grids differ in x".into(),
            ));
        }
    }
    let opts = rhs_options(snapshot, cfg);
    let x: &XGrid = &grid.x;
    let interior: Vec<usize> = (0..x.cells()).filter(|&c| !x.on_boundary(c)).collect();
    let tau_axis = grid.tau_axis;
    let cell_measure = x.cell_volume() * tau_axis.width();
    let t = grid.t;

    let continuous: Vec<Vec<CellResidual>> = interior
        .par_iter()
        .map(|&c| {
            let center = ThoughtPoint::from_array(x.center(c));
            let mut out = Vec::with_capacity(grid.n_y * tau_axis.bins);
            for y in 0..grid.n_y {
                for ti in 0..tau_axis.bins {
                    let rhs = kernel_rhs_detailed(
                        spec,
                        center,
                        CognitiveIndex(y),
                        tau_axis.center(ti),
                        t,
                        history,
                        RhsTerm::Renewal,
                        &opts,
                    )?;
                    let emp = grid.density(c, y, ti);
                    let se = grid.density_se(c, y, ti);
                    out.push(CellResidual {
                        abs: (emp - rhs.value).abs(),
                        sigma: (se * se + rhs.std_error * rhs.std_error).sqrt(),
                        measure: cell_measure,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_, VerifyError>>()?;
    let continuous: Vec<CellResidual> = continuous.into_iter().flatten().collect();
    let mut components = vec![summarize("continuous", &continuous)];
    let mut all = continuous;

    let mut atom_report = None;
    let mut notes = vec![
        "outermost cell ring excluded: reversed trajectories from it leave the grid".to_string(),
    ];
    if grid.separate_atom {
        let report = AtomReport::from_snapshot(spec, snapshot)?;
        let term = RhsTerm::Atom {
            weight: report.measured,
            weight_se: report.measured_se,
        };
        let elapsed = t - snapshot.t_start;
        let atom: Vec<Vec<CellResidual>> = interior
            .par_iter()
            .map(|&c| {
                let center = ThoughtPoint::from_array(x.center(c));
                (0..grid.n_y)
                    .map(|y| {
                        let rhs = kernel_rhs_detailed(
                            spec,
                            center,
                            CognitiveIndex(y),
                            elapsed,
                            t,
                            history,
                            term,
                            &opts,
                        )?;
                        let emp = grid.atom_density(c, y);
                        let se = grid.atom_density_se(c, y);
                        Ok(CellResidual {
                            abs: (emp - rhs.value).abs(),
                            sigma: (se * se + rhs.std_error * rhs.std_error).sqrt(),
                            measure: x.cell_volume(),
                        })
                    })
                    .collect::<Result<Vec<_>, VerifyError>>()
            })
            .collect::<Result<_, VerifyError>>()?;
        let atom: Vec<CellResidual> = atom.into_iter().flatten().collect();
        components.push(summarize("atom", &atom));
        all.extend(atom);
        notes.push(report.note.clone());
        atom_report = Some(report);
    } else {
        notes.push("no atom term: never-jumped particles are binned with the continuous part".into());
    }

    let total = summarize("total", &all);
    Ok(ResidualReport {
        theorem: TheoremId::kernel(snapshot.time_origin),
        l1: total.l1,
        linf: total.linf,
        noise_floor: total.noise_floor,
        noise_floor_linf: max_sigma(&all),
        k_noise: cfg.k_noise,
        pass: residual_passes(total.l1, total.noise_floor, cfg.k_noise),
        cells_evaluated: all.len(),
        components,
        atom: atom_report,
        metadata: ReportMetadata {
            n: grid.n,
            x_bins: x.axes.iter().map(|a| a.bins).collect(),
            cell_widths: x.axes.iter().map(|a| a.width()).collect(),
            tau_bins: Some(tau_axis.bins),
            tau_max: Some(tau_axis.hi),
            t,
            t_start: snapshot.t_start,
            dt: None,
            step: Some(cfg.step),
            h_div: cfg.h_div,
            excluded_outer_ring: true,
            model_hash: spec.model_hash(),
        },
        notes,
    })
}

/// L1 distance between the jump-at-zero and stationary right-hand sides at
/// time `t`. They differ only in the atom term, evaluated here with
/// `atom_weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormComparison {
    pub t: f64,
    pub atom_weight: f64,
    pub l1_difference: f64,
    /// Same distance with the printed coefficient `1 - e^{-lambda t}`.
    pub l1_difference_printed: f64,
}

pub fn compare_rhs_forms(
    spec: &ModelSpec,
    history: &DensityHistory,
    x: &XGrid,
    t: f64,
    opts: &RhsOptions,
) -> Result<FormComparison, VerifyError> {
    let elapsed = t - opts.t_start;
    let weight = (-spec.lambda * elapsed).exp();
    // The atom term is linear in its weight, so evaluate it once with unit
    // weight and scale.
    let unit: Vec<f64> = (0..x.cells())
        .into_par_iter()
        .map(|c| {
            let center = ThoughtPoint::from_array(x.center(c));
            (0..spec.cognitive_size)
                .map(|y| {
                    kernel_rhs_detailed(
                        spec,
                        center,
                        CognitiveIndex(y),
                        elapsed,
                        t,
                        history,
                        RhsTerm::Atom {
                            weight: 1.0,
                            weight_se: 0.0,
                        },
                        opts,
                    )
                    .map(|r| r.value.abs() * x.cell_volume())
                })
                .sum::<Result<f64, VerifyError>>()
        })
        .collect::<Result<_, VerifyError>>()?;
    let unit_l1: f64 = unit.iter().sum();
    Ok(FormComparison {
        t,
        atom_weight: weight,
        l1_difference: weight * unit_l1,
        l1_difference_printed: (1.0 - weight) * unit_l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::XMarginal;
    use crate::model::{DomainBox, InitialDensity, TransitionKernel, VelocityField};
    use crate::sim::sample_initial;

    fn zero_spec() -> ModelSpec {
        ModelSpec {
            dim: 1,
            domain: DomainBox {
                lo: vec![-2.0],
                hi: vec![2.0],
            },
            cognitive_size: 2,
            velocity: VelocityField::Constant {
                vectors: vec![vec![0.0], vec![0.0]],
            },
            kernel: TransitionKernel::Weights {
                weights: vec![0.25, 0.75],
            },
            lambda: 1.5,
            initial: InitialDensity::Gaussian {
                mean: vec![0.0],
                std: vec![0.5],
            },
            time_origin: TimeOrigin::JumpAtZero,
            boundary: BoundaryMode::Strict,
            support_damping: None,
        }
    }

    fn history_at_zero(spec: &ModelSpec) -> DensityHistory {
        let snap = sample_initial(spec, 2000, 3).unwrap();
        let mut h = DensityHistory::new(0.1);
        h.push(XMarginal::estimate(spec, &snap, &[20]).unwrap());
        h
    }

    #[test]
    fn zero_field_rhs_factorizes() {
        let spec = zero_spec();
        let h = history_at_zero(&spec);
        let m = &h.entries[0];
        let opts = RhsOptions::default();
        for &(xv, y) in &[(0.1, 0usize), (-0.7, 1), (1.3, 1)] {
            let x = ThoughtPoint::new(&[xv]);
            let got = kernel_rhs(&spec, x, CognitiveIndex(y), 0.7, 0.7, &h, &opts).unwrap();
            let rho = m.interpolate(&x.coords).unwrap().0;
            let psi = [0.25, 0.75][y];
            let want = 1.5 * (-1.5f64 * 0.7).exp() * rho * psi;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn tau_beyond_origin_and_missing_history() {
        let spec = zero_spec();
        let h = history_at_zero(&spec);
        let opts = RhsOptions::default();
        let x = ThoughtPoint::new(&[0.0]);
        assert!(matches!(
            kernel_rhs(&spec, x, CognitiveIndex(0), 1.0, 0.5, &h, &opts),
            Err(VerifyError::TauBeyondOrigin { .. })
        ));
        assert!(matches!(
            kernel_rhs(&spec, x, CognitiveIndex(0), 0.2, 0.5, &h, &opts),
            Err(VerifyError::MissingHistory(_))
        ));
    }

    #[test]
    fn reversed_point_outside_contributes_zero() {
        let mut spec = zero_spec();
        spec.velocity = VelocityField::Constant {
            vectors: vec![vec![1.0], vec![1.0]],
        };
        let h = history_at_zero(&spec);
        let v = kernel_rhs(
            &spec,
            ThoughtPoint::new(&[-1.5]),
            CognitiveIndex(0),
            1.0,
            1.0,
            &h,
            &RhsOptions::default(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn atom_report_flags_printed_coefficient() {
        let r = AtomReport::new(0.3679, 1_000_000, 1.0, 1.0);
        assert!(r.consistent_with_total_probability);
        assert!(!r.consistent_with_printed);
        assert!(r.note.contains("inconsistent"));
    }

    #[test]
    fn pass_is_pure_function_of_numbers() {
        let spec = zero_spec();
        let snap = sample_initial(&spec, 3000, 8).unwrap();
        let (later, _) = crate::sim::simulate_continuous(&spec, &snap, 0.05, 0.01).unwrap();
        let r = continuity_residual_paired(&spec, &snap, &later, &[20], &ContinuityOptions::default())
            .unwrap();
        assert_eq!(r.pass, r.evaluate_pass());
        assert_eq!(r.l1, 0.0);
        assert_eq!(r.theorem, TheoremId::ContinuityJumpAtZero);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["theorem"], "continuity-jump-at-zero");
    }

    #[test]
    fn incompatible_grids_rejected() {
        let spec = zero_spec();
        let snap = sample_initial(&spec, 100, 8).unwrap();
        let a = estimate_density(&spec, &snap, &GridConfig::uniform(1, 10, 2)).unwrap();
        let b = estimate_density(&spec, &snap, &GridConfig::uniform(1, 12, 2)).unwrap();
        assert!(matches!(
            continuity_residual(&spec, &a, &b, &ContinuityOptions::default()),
            Err(VerifyError::Incompatible(_))
        ));
    }
}
