// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Thread batches under switching generators.
//!
//! A batch state `psi` is a complex vector of fixed length `n` (inactive
//! threads are zero entries). Between switches it follows the Itô SDE
//!
//! ```text
//! dpsi = (A_phi + D D / 2) psi dt + D psi dB
//! ```
//!
//! with one scalar Brownian motion `B`, and `phi` is re-selected at rate
//! `lambda_phi`. The density matrix `rho = sum_j psi_j psi_j^H` then obeys
//!
//! ```text
//! drho = (A rho + rho A^H - D^H D rho / 2 - rho D^H D / 2 + D rho D^H) dt
//!        + (D rho + rho D^H) dB
//! ```
//!
//! and its expectation the deterministic Lindblad-like equation obtained by
//! dropping the `dB` term. `D` must be anti-Hermitian, which makes
//! `D D / 2 = -D^H D / 2` and keeps the two descriptions consistent.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{EventStream, StreamKind};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Tolerance of the anti-Hermitian check on `D`, relative to `max(1, |D|_F)`.
pub const ANTI_HERMITIAN_TOL: f64 = 1e-12;
/// Tolerance on switch-kernel row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Paths per deterministic work unit of the Monte Carlo mean.
const MC_CHUNK: u64 = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BreadthError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("diffusion matrix is not anti-Hermitian (|D + D^H|_F = {0:e})")]
    NotAntiHermitian(f64),
    #[error("switch kernel row {row} sums to {sum}, expected 1")]
    KernelRow { row: usize, sum: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "lambda_phi * dt = {0} must be below 1 for the per-step switching probability to be valid"
    )]
    SwitchStepTooLarge(f64),
    #[error("at least one state is required")]
    Empty,
    #[error("generator set JSON: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// JSON forms. Complex entries are written as [re, im].
// ---------------------------------------------------------------------------

type JsonMatrix = Vec<Vec<[f64; 2]>>;
type JsonVector = Vec<[f64; 2]>;

fn matrix_from_json(rows: &JsonMatrix, what: &str) -> Result<CMatrix, BreadthError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(BreadthError::Shape(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(CMatrix::from_fn(r, c, |i, j| {
        let [re, im] = rows[i][j];
        C64::new(re, im)
    }))
}

fn matrix_to_json(m: &CMatrix) -> JsonMatrix {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect()
}

pub fn vector_from_json(v: &JsonVector) -> CVector {
    CVector::from_iterator(v.len(), v.iter().map(|[re, im]| C64::new(*re, *im)))
}

pub fn vector_to_json(v: &CVector) -> JsonVector {
    v.iter().map(|z| [z.re, z.im]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SwitchKernelJson {
    Matrix { rows: Vec<Vec<f64>> },
    Softmax { beta: f64, references: Vec<JsonVector> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSetJson {
    pub generators: Vec<JsonMatrix>,
    pub switch_rate: f64,
    pub switch_kernel: SwitchKernelJson,
    pub diffusion: JsonMatrix,
}

// ---------------------------------------------------------------------------
// Generator sets
// ---------------------------------------------------------------------------

/// How the next generator index is chosen at a switch.
#[derive(Debug, Clone, PartialEq)]
pub enum SwitchKernel {
    /// Row-stochastic `m x m` matrix, independent of `psi`.
    Matrix(DMatrix<f64>),
    /// `P(phi -> j) ∝ exp(-beta |psi - r_j|^2)`.
    Softmax { beta: f64, references: Vec<CVector> },
}

impl SwitchKernel {
    fn probabilities(&self, phi: usize, psi: &CVector, out: &mut Vec<f64>) {
        out.clear();
        match self {
            SwitchKernel::Matrix(p) => out.extend(p.row(phi).iter().copied()),
            SwitchKernel::Softmax { beta, references } => {
                let d2: Vec<f64> = references.iter().map(|r| (psi - r).norm_squared()).collect();
                let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
                out.extend(d2.iter().map(|d| (-beta * (d - min)).exp()));
                let total: f64 = out.iter().sum();
                out.iter_mut().for_each(|p| *p /= total);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeneratorSetJson", into = "GeneratorSetJson")]
pub struct SwitchingGeneratorSet {
    pub generators: Vec<CMatrix>,
    pub switch_rate: f64,
    pub switch_kernel: SwitchKernel,
    pub diffusion: CMatrix,
}

impl TryFrom<GeneratorSetJson> for SwitchingGeneratorSet {
    type Error = BreadthError;

    fn try_from(j: GeneratorSetJson) -> Result<Self, BreadthError> {
        let generators = j
            .generators
            .iter()
            .enumerate()
            .map(|(k, g)| matrix_from_json(g, &format!("generator {k}")))
            .collect::<Result<Vec<_>, _>>()?;
        let diffusion = matrix_from_json(&j.diffusion, "diffusion")?;
        let switch_kernel = match j.switch_kernel {
            SwitchKernelJson::Matrix { rows } => {
                let m = rows.len();
                if rows.iter().any(|r| r.len() != m) {
                    return Err(BreadthError::Shape("switch kernel must be square".into()));
                }
                SwitchKernel::Matrix(DMatrix::from_fn(m, m, |i, k| rows[i][k]))
            }
            SwitchKernelJson::Softmax { beta, references } => SwitchKernel::Softmax {
                beta,
                references: references.iter().map(vector_from_json).collect(),
            },
        };
        Self::new(generators, j.switch_rate, switch_kernel, diffusion)
    }
}

impl From<SwitchingGeneratorSet> for GeneratorSetJson {
    fn from(g: SwitchingGeneratorSet) -> Self {
        let switch_kernel = match &g.switch_kernel {
            SwitchKernel::Matrix(p) => SwitchKernelJson::Matrix {
                rows: (0..p.nrows()).map(|i| p.row(i).iter().copied().collect()).collect(),
            },
            SwitchKernel::Softmax { beta, references } => SwitchKernelJson::Softmax {
                beta: *beta,
                references: references.iter().map(vector_to_json).collect(),
            },
        };
        Self {
            generators: g.generators.iter().map(matrix_to_json).collect(),
            switch_rate: g.switch_rate,
            switch_kernel,
            diffusion: matrix_to_json(&g.diffusion),
        }
    }
}

impl SwitchingGeneratorSet {
    /// Validates and builds a generator set.
    pub fn new(
        generators: Vec<CMatrix>,
        switch_rate: f64,
        switch_kernel: SwitchKernel,
        diffusion: CMatrix,
    ) -> Result<Self, BreadthError> {
        let n = diffusion.nrows();
        if n == 0 || !diffusion.is_square() {
            return Err(BreadthError::Shape("diffusion must be square and non-empty".into()));
        }
        if generators.is_empty() {
            return Err(BreadthError::Empty);
        }
        for (k, a) in generators.iter().enumerate() {
            if a.shape() != (n, n) {
                return Err(BreadthError::Shape(format!(
                    "generator {k} is {:?}, expected ({n}, {n})",
                    a.shape()
                )));
            }
        }
        if !(switch_rate >= 0.0 && switch_rate.is_finite()) {
            return Err(BreadthError::InvalidParameter(format!(
                "switch rate must be non-negative, got {switch_rate}"
            )));
        }
        let asym = (&diffusion + diffusion.adjoint()).norm();
        if asym > ANTI_HERMITIAN_TOL * diffusion.norm().max(1.0) {
            return Err(BreadthError::NotAntiHermitian(asym));
        }
        let m = generators.len();
        match &switch_kernel {
            SwitchKernel::Matrix(p) => {
                if p.shape() != (m, m) {
                    return Err(BreadthError::Shape(format!(
                        "switch kernel is {:?} for {m} generators",
                        p.shape()
                    )));
                }
                for i in 0..m {
                    if p.row(i).iter().any(|x| *x < 0.0 || !x.is_finite()) {
                        return Err(BreadthError::InvalidParameter(format!(
                            "switch kernel row {i} has a negative or non-finite entry"
                        )));
                    }
                    let sum: f64 = p.row(i).iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(BreadthError::KernelRow { row: i, sum });
                    }
                }
            }
            SwitchKernel::Softmax { beta, references } => {
                if references.len() != m || references.iter().any(|r| r.len() != n) {
                    return Err(BreadthError::Shape(format!(
                        "softmax switching needs {m} reference vectors of length {n}"
                    )));
                }
                if !beta.is_finite() {
                    return Err(BreadthError::InvalidParameter("beta must be finite".into()));
                }
            }
        }
        Ok(Self {
            generators,
            switch_rate,
            switch_kernel,
            diffusion,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, BreadthError> {
        let j: GeneratorSetJson =
            serde_json::from_str(text).map_err(|e| BreadthError::Parse(e.to_string()))?;
        Self::try_from(j)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GeneratorSetJson::from(self.clone()))
            .expect("generator sets always serialize")
    }

    pub fn dim(&self) -> usize {
        self.diffusion.nrows()
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    fn check_phi(&self, phi: usize) -> Result<(), BreadthError> {
        if phi < self.len() {
            Ok(())
        } else {
            Err(BreadthError::InvalidParameter(format!(
                "generator index {phi} out of range (m = {})",
                self.len()
            )))
        }
    }

    fn check_switch_step(&self, dt: f64) -> Result<(), BreadthError> {
        let p = self.switch_rate * dt;
        if !(dt > 0.0) {
            return Err(BreadthError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if p >= 1.0 {
            return Err(BreadthError::SwitchStepTooLarge(p));
        }
        Ok(())
    }
}

/// Matrices derived once per run.
struct Prepared {
    /// `A_k + D D / 2`, the thread drift.
    thread_drift: Vec<CMatrix>,
    /// `A_k - D^H D / 2`.
    m: Vec<CMatrix>,
    m_adj: Vec<CMatrix>,
    d: CMatrix,
    d_adj: CMatrix,
}

impl Prepared {
    fn new(g: &SwitchingGeneratorSet) -> Self {
        let d = g.diffusion.clone();
        let d_adj = d.adjoint();
        let half_dd = (&d * &d) * C64::new(0.5, 0.0);
        let half_dhd = (&d_adj * &d) * C64::new(0.5, 0.0);
        let m: Vec<CMatrix> = g.generators.iter().map(|a| a - &half_dhd).collect();
        Self {
            thread_drift: g.generators.iter().map(|a| a + &half_dd).collect(),
            m_adj: m.iter().map(|x| x.adjoint()).collect(),
            m,
            d,
            d_adj,
        }
    }
}

// ---------------------------------------------------------------------------
// States and density matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ThreadBatchState {
    pub psi: CVector,
    pub phi: usize,
}

impl ThreadBatchState {
    /// Pads the active thread amplitudes with zeros up to length `n`.
    pub fn padded(active: &[C64], n: usize, phi: usize) -> Result<Self, BreadthError> {
        if active.len() > n {
            return Err(BreadthError::Shape(format!(
                "{} active threads exceed the batch length {n}",
                active.len()
            )));
        }
        let mut psi = CVector::zeros(n);
        psi.rows_mut(0, active.len()).copy_from_slice(active);
        Ok(Self { psi, phi })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub rho: CMatrix,
}

impl DensityMatrix {
    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    /// `|rho - rho^H|_F`.
    pub fn hermiticity_error(&self) -> f64 {
        (&self.rho - self.rho.adjoint()).norm()
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = (&self.rho + self.rho.adjoint()) * C64::new(0.5, 0.0);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// `rho = sum_j psi_j psi_j^H`.
pub fn density_from_states(states: &[CVector]) -> Result<DensityMatrix, BreadthError> {
    let first = states.first().ok_or(BreadthError::Empty)?;
    let n = first.len();
    let mut rho = CMatrix::zeros(n, n);
    for s in states {
        if s.len() != n {
            return Err(BreadthError::Shape(format!(
                "state of length {} among states of length {n}",
                s.len()
            )));
        }
        rho.gerc(C64::new(1.0, 0.0), s, s, C64::new(1.0, 0.0));
    }
    Ok(DensityMatrix { rho })
}

// ---------------------------------------------------------------------------
// Thread paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ThreadPath {
    pub times: Vec<f64>,
    pub psi: Vec<CVector>,
    /// `phi[k]` is the generator active during step `k`; the last entry is
    /// the index after the final step.
    pub phi: Vec<usize>,
    /// Brownian increments, one per step.
    pub increments: Vec<f64>,
}

/// Brownian increments of path `path` are consecutive draws of one
/// generator; switching decisions use a separate generator, so thread and
/// density paths with the same address see the same noise.
fn path_rng(seed: u64, path: u64, kind: StreamKind) -> ChaCha8Rng {
    EventStream::new(seed, path, kind).event(0)
}

fn brownian<R: Rng + ?Sized>(rng: &mut R, dt: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * dt.sqrt()
}

/// Brownian increments of path `path`, identical to those used by
/// [`evolve_thread`] with the same seed and path index.
pub fn brownian_increments(seed: u64, path: u64, dt: f64, steps: usize) -> Vec<f64> {
    let mut rng = path_rng(seed, path, StreamKind::Path);
    (0..steps).map(|_| brownian(&mut rng, dt)).collect()
}

fn thread_step(prep: &Prepared, psi: &mut CVector, phi: usize, dt: f64, db: f64, scratch: &mut CVector) {
    // scratch = B psi dt + D psi dB, then psi += scratch
    scratch.gemv(C64::new(dt, 0.0), &prep.thread_drift[phi], psi, C64::new(0.0, 0.0));
    scratch.gemv(C64::new(db, 0.0), &prep.d, psi, C64::new(1.0, 0.0));
    *psi += &*scratch;
}

/// Euler-Maruyama path of one thread batch with Markovian switching.
pub fn evolve_thread(
    state: &ThreadBatchState,
    gens: &SwitchingGeneratorSet,
    dt: f64,
    steps: usize,
    seed: u64,
    path: u64,
) -> Result<ThreadPath, BreadthError> {
    gens.check_switch_step(dt)?;
    gens.check_phi(state.phi)?;
    if state.psi.len() != gens.dim() {
        return Err(BreadthError::Shape("state length differs from generator size".into()));
    }
    let prep = Prepared::new(gens);
    let mut psi = state.psi.clone();
    let mut phi = state.phi;
    let mut scratch = CVector::zeros(psi.len());
    let mut probs = Vec::with_capacity(gens.len());
    let mut out = ThreadPath {
        times: vec![0.0],
        psi: vec![psi.clone()],
        phi: vec![phi],
        increments: Vec::with_capacity(steps),
    };
    let p_switch = gens.switch_rate * dt;
    let mut noise = path_rng(seed, path, StreamKind::Path);
    let mut switching = path_rng(seed, path, StreamKind::Switch);
    for k in 0..steps {
        let db = brownian(&mut noise, dt);
        thread_step(&prep, &mut psi, phi, dt, db, &mut scratch);
        let u: f64 = switching.random();
        if u < p_switch {
            gens.switch_kernel.probabilities(phi, &psi, &mut probs);
            let v: f64 = switching.random();
            phi = pick(&probs, v);
        }
        out.increments.push(db);
        out.times.push((k + 1) as f64 * dt);
        out.psi.push(psi.clone());
        out.phi.push(phi);
    }
    Ok(out)
}

fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn check_drive(
    gens: &SwitchingGeneratorSet,
    increments: &[f64],
    phi_path: &[usize],
) -> Result<(), BreadthError> {
    if phi_path.len() < increments.len() {
        return Err(BreadthError::Shape(format!(
            "phi path has {} entries for {} steps",
            phi_path.len(),
            increments.len()
        )));
    }
    phi_path.iter().try_for_each(|&p| gens.check_phi(p))
}

/// Thread evolution driven by given increments and generator indices.
pub fn evolve_thread_driven(
    psi0: &CVector,
    gens: &SwitchingGeneratorSet,
    dt: f64,
    increments: &[f64],
    phi_path: &[usize],
) -> Result<Vec<CVector>, BreadthError> {
    check_drive(gens, increments, phi_path)?;
    if psi0.len() != gens.dim() {
        return Err(BreadthError::Shape("state length differs from generator size".into()));
    }
    let prep = Prepared::new(gens);
    let mut psi = psi0.clone();
    let mut scratch = CVector::zeros(psi.len());
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(psi.clone());
    for (k, db) in increments.iter().enumerate() {
        thread_step(&prep, &mut psi, phi_path[k], dt, *db, &mut scratch);
        out.push(psi.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Density-matrix evolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    pub times: Vec<f64>,
    pub rho: Vec<CMatrix>,
}

impl DensityPath {
    pub fn last(&self) -> &CMatrix {
        self.rho.last().expect("paths hold the initial matrix")
    }

    pub fn max_hermiticity_error(&self) -> f64 {
        self.rho
            .iter()
            .map(|r| (r - r.adjoint()).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_trace_drift(&self) -> f64 {
        let t0 = self.rho[0].trace();
        self.rho
            .iter()
            .map(|r| (r.trace() - t0).norm())
            .fold(0.0, f64::max)
    }
}

/// Work buffers for the matrix stepper.
struct Scratch {
    a: CMatrix,
    b: CMatrix,
    x: CMatrix,
    xa: CMatrix,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            a: CMatrix::zeros(n, n),
            b: CMatrix::zeros(n, n),
            x: CMatrix::zeros(n, n),
            xa: CMatrix::zeros(n, n),
        }
    }
}

const ONE: C64 = C64::new(1.0, 0.0);
const ZERO: C64 = C64::new(0.0, 0.0);

/// `y += a x`.
fn axpy(y: &mut CMatrix, a: C64, x: &CMatrix) {
    y.zip_apply(x, |yi, xi| *yi += a * xi);
}

/// One Euler-Maruyama step of the matrix SDE, in place. With
/// `X = M dt + D dB` the increment is `X rho + rho X^H + D rho D^H dt`.
fn density_em_step(prep: &Prepared, rho: &mut CMatrix, phi: usize, dt: f64, db: f64, s: &mut Scratch) {
    let cdt = C64::new(dt, 0.0);
    s.x.zip_zip_apply(&prep.m[phi], &prep.d, |x, m, d| *x = m * dt + d * db);
    s.x.adjoint_to(&mut s.xa);
    s.b.gemm(ONE, &s.x, rho, ZERO);
    s.b.gemm(ONE, rho, &s.xa, ONE);
    s.a.gemm(ONE, &prep.d, rho, ZERO);
    s.b.gemm(cdt, &s.a, &prep.d_adj, ONE);
    *rho += &s.b;
}

fn check_rho(rho0: &DensityMatrix, gens: &SwitchingGeneratorSet) -> Result<(), BreadthError> {
    let n = gens.dim();
    if rho0.rho.shape() != (n, n) {
        return Err(BreadthError::Shape(format!(
            "density matrix is {:?}, generators are {n}x{n}",
            rho0.rho.shape()
        )));
    }
    Ok(())
}

/// Euler-Maruyama on the density-matrix SDE along a given generator path.
/// The Brownian increments are those of path `path` under `seed`, so a
/// thread batch evolved with the same addresses sees the same noise.
pub fn evolve_density_stochastic(
    rho0: &DensityMatrix,
    gens: &SwitchingGeneratorSet,
    phi_path: &[usize],
    dt: f64,
    steps: usize,
    seed: u64,
    path: u64,
) -> Result<DensityPath, BreadthError> {
    let inc = brownian_increments(seed, path, dt, steps);
    evolve_density_driven(rho0, gens, phi_path, dt, &inc)
}

/// Euler-Maruyama on the density-matrix SDE with explicit increments.
pub fn evolve_density_driven(
    rho0: &DensityMatrix,
    gens: &SwitchingGeneratorSet,
    phi_path: &[usize],
    dt: f64,
    increments: &[f64],
) -> Result<DensityPath, BreadthError> {
    check_rho(rho0, gens)?;
    check_drive(gens, increments, phi_path)?;
    if !(dt > 0.0) {
        return Err(BreadthError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let prep = Prepared::new(gens);
    let mut rho = rho0.rho.clone();
    let mut s = Scratch::new(gens.dim());
    let mut out = DensityPath {
        times: vec![0.0],
        rho: vec![rho.clone()],
    };
    for (k, db) in increments.iter().enumerate() {
        density_em_step(&prep, &mut rho, phi_path[k], dt, *db, &mut s);
        out.times.push((k + 1) as f64 * dt);
        out.rho.push(rho.clone());
    }
    Ok(out)
}

/// Deterministic generator schedule for the expected equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSchedule {
    Fixed { phi: usize },
    /// `(start time, index)` pairs sorted by start time; the first start
    /// must be 0.
    Piecewise { segments: Vec<(f64, usize)> },
}

impl PhiSchedule {
    pub fn at(&self, t: f64) -> usize {
        match self {
            PhiSchedule::Fixed { phi } => *phi,
            PhiSchedule::Piecewise { segments } => segments
                .iter()
                .rev()
                .find(|(start, _)| *start <= t)
                .map_or(segments[0].1, |s| s.1),
        }
    }

    fn validate(&self, gens: &SwitchingGeneratorSet) -> Result<(), BreadthError> {
        match self {
            PhiSchedule::Fixed { phi } => gens.check_phi(*phi),
            PhiSchedule::Piecewise { segments } => {
                if segments.first().map(|s| s.0) != Some(0.0) {
                    return Err(BreadthError::InvalidParameter(
                        "piecewise schedule must start at t = 0".into(),
                    ));
                }
                if segments.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(BreadthError::InvalidParameter(
                        "schedule start times must increase".into(),
                    ));
                }
                segments.iter().try_for_each(|s| gens.check_phi(s.1))
            }
        }
    }
}

/// `M rho + rho M^H + D rho D^H`.
fn lindblad_rhs(prep: &Prepared, rho: &CMatrix, phi: usize, out: &mut CMatrix, tmp: &mut CMatrix) {
    out.gemm(ONE, &prep.m[phi], rho, ZERO);
    out.gemm(ONE, rho, &prep.m_adj[phi], ONE);
    tmp.gemm(ONE, &prep.d, rho, ZERO);
    out.gemm(ONE, tmp, &prep.d_adj, ONE);
}

/// Classical RK4 on the expected (Lindblad-like) equation.
pub fn evolve_density_expected(
    rho0: &DensityMatrix,
    gens: &SwitchingGeneratorSet,
    schedule: &PhiSchedule,
    dt: f64,
    steps: usize,
) -> Result<DensityPath, BreadthError> {
    check_rho(rho0, gens)?;
    schedule.validate(gens)?;
    if !(dt > 0.0) {
        return Err(BreadthError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let prep = Prepared::new(gens);
    let n = gens.dim();
    let mut rho = rho0.rho.clone();
    let (mut k1, mut k2, mut k3, mut k4) = (
        CMatrix::zeros(n, n),
        CMatrix::zeros(n, n),
        CMatrix::zeros(n, n),
        CMatrix::zeros(n, n),
    );
    let mut tmp = CMatrix::zeros(n, n);
    let mut stage = CMatrix::zeros(n, n);
    let mut out = DensityPath {
        times: vec![0.0],
        rho: vec![rho.clone()],
    };
    let half = C64::new(0.5 * dt, 0.0);
    let full = C64::new(dt, 0.0);
    for k in 0..steps {
        let t = k as f64 * dt;
        let (p0, pm, p1) = (schedule.at(t), schedule.at(t + 0.5 * dt), schedule.at(t + dt));
        lindblad_rhs(&prep, &rho, p0, &mut k1, &mut tmp);
        stage.copy_from(&rho);
        axpy(&mut stage, half, &k1);
        lindblad_rhs(&prep, &stage, pm, &mut k2, &mut tmp);
        stage.copy_from(&rho);
        axpy(&mut stage, half, &k2);
        lindblad_rhs(&prep, &stage, pm, &mut k3, &mut tmp);
        stage.copy_from(&rho);
        axpy(&mut stage, full, &k3);
        lindblad_rhs(&prep, &stage, p1, &mut k4, &mut tmp);
        let w = C64::new(dt / 6.0, 0.0);
        axpy(&mut rho, w, &k1);
        axpy(&mut rho, w * 2.0, &k2);
        axpy(&mut rho, w * 2.0, &k3);
        axpy(&mut rho, w, &k4);
        out.times.push((k + 1) as f64 * dt);
        out.rho.push(rho.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Monte Carlo expectation
// ---------------------------------------------------------------------------

/// Running sums of final density matrices over Monte Carlo paths.
#[derive(Debug, Clone, PartialEq)]
pub struct McAccumulator {
    pub count: u64,
    pub sum: CMatrix,
    /// Entry-wise sums of `|rho_ij|^2`.
    pub sum_sq: DMatrix<f64>,
}

impl McAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            count: 0,
            sum: CMatrix::zeros(n, n),
            sum_sq: DMatrix::zeros(n, n),
        }
    }

    pub fn add(&mut self, rho: &CMatrix) {
        self.count += 1;
        self.sum += rho;
        self.sum_sq += rho.map(|z| z.norm_sqr());
    }

    pub fn merge(&mut self, other: &McAccumulator) {
        self.count += other.count;
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
    }

    pub fn mean(&self) -> CMatrix {
        &self.sum / C64::new(self.count as f64, 0.0)
    }

    /// Standard error of the mean in Frobenius norm:
    /// `sqrt(sum_ij var_ij / M)` with unbiased per-entry variances.
    pub fn standard_error(&self) -> f64 {
        let m = self.count as f64;
        if self.count < 2 {
            return f64::NAN;
        }
        let mean = self.mean();
        let mut total = 0.0;
        for (s2, mu) in self.sum_sq.iter().zip(mean.iter()) {
            total += ((s2 - m * mu.norm_sqr()) / (m - 1.0)).max(0.0);
        }
        (total / m).sqrt()
    }
}

/// Final matrices of paths `first .. first + count` of the stochastic
/// density equation with a fixed generator, accumulated in path order.
/// Chunks of paths run in parallel and are merged in index order, so the
/// result does not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn mc_density_paths(
    rho0: &DensityMatrix,
    gens: &SwitchingGeneratorSet,
    phi: usize,
    dt: f64,
    steps: usize,
    seed: u64,
    first: u64,
    count: u64,
) -> Result<McAccumulator, BreadthError> {
    check_rho(rho0, gens)?;
    gens.check_phi(phi)?;
    if !(dt > 0.0) {
        return Err(BreadthError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let prep = Prepared::new(gens);
    let n = gens.dim();
    let chunks: Vec<(u64, u64)> = (0..count.div_ceil(MC_CHUNK))
        .map(|c| {
            let start = first + c * MC_CHUNK;
            (start, MC_CHUNK.min(first + count - start))
        })
        .collect();
    let partial: Vec<McAccumulator> = chunks
        .par_iter()
        .map(|&(start, len)| {
            let mut acc = McAccumulator::new(n);
            let mut s = Scratch::new(n);
            let mut rho = CMatrix::zeros(n, n);
            for path in start..start + len {
                rho.copy_from(&rho0.rho);
                let mut noise = path_rng(seed, path, StreamKind::Path);
                for _ in 0..steps {
                    let db = brownian(&mut noise, dt);
                    density_em_step(&prep, &mut rho, phi, dt, db, &mut s);
                }
                acc.add(&rho);
            }
            acc
        })
        .collect();
    let mut total = McAccumulator::new(n);
    for p in &partial {
        total.merge(p);
    }
    Ok(total)
}

/// Wide CSV of a density path: `t` followed by `re_i_j,im_i_j` for every
/// entry in row-major order.
pub fn density_path_csv(path: &DensityPath) -> String {
    use std::fmt::Write;
    let n = path.rho.first().map_or(0, |r| r.nrows());
    let mut s = String::from("t");
    for i in 0..n {
        for j in 0..n {
            let _ = write!(s, ",re_{i}_{j},im_{i}_{j}");
        }
    }
    s.push('\n');
    for (t, r) in path.times.iter().zip(&path.rho) {
        let _ = write!(s, "{t:.16e}");
        for i in 0..n {
            for j in 0..n {
                let _ = write!(s, ",{:.16e},{:.16e}", r[(i, j)].re, r[(i, j)].im);
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn rotation_set() -> SwitchingGeneratorSet {
        let a = CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        SwitchingGeneratorSet::new(
            vec![a],
            1.0,
            SwitchKernel::Matrix(DMatrix::from_element(1, 1, 1.0)),
            CMatrix::zeros(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn outer_product_example() {
        let s = 0.5f64.sqrt();
        let psi = CVector::from_vec(vec![c(s, 0.0), c(0.0, s)]);
        let rho = density_from_states(&[psi]).unwrap().rho;
        let want = CMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(0.0, -0.5), c(0.0, 0.5), c(0.5, 0.0)]);
        assert!((rho - want).norm() < 1e-15);
        assert!(matches!(density_from_states(&[]), Err(BreadthError::Empty)));
    }

    #[test]
    fn orthonormal_basis_gives_identity() {
        let states: Vec<CVector> = (0..3)
            .map(|i| CVector::from_fn(3, |j, _| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) }))
            .collect();
        let d = density_from_states(&states).unwrap();
        assert_eq!(d.rho, CMatrix::identity(3, 3));
        assert_eq!(d.trace(), c(3.0, 0.0));
    }

    #[test]
    fn rotation_reaches_e1() {
        let g = rotation_set();
        let st = ThreadBatchState::padded(&[c(1.0, 0.0)], 2, 0).unwrap();
        let dt = 1e-4;
        let steps = (std::f64::consts::FRAC_PI_2 / dt).round() as usize;
        let path = evolve_thread(&st, &g, dt, steps, 1, 0).unwrap();
        let end = path.psi.last().unwrap();
        assert!((end[0]).norm() < 1e-4, "{end}");
        assert!((end[1] - c(1.0, 0.0)).norm() < 1e-3, "{end}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let err = SwitchingGeneratorSet::new(
            vec![CMatrix::zeros(2, 2)],
            1.0,
            SwitchKernel::Matrix(DMatrix::from_element(1, 1, 1.0)),
            d,
        );
        assert!(matches!(err, Err(BreadthError::NotAntiHermitian(_))));
        let err = SwitchingGeneratorSet::new(
            vec![CMatrix::zeros(2, 2); 2],
            1.0,
            SwitchKernel::Matrix(DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.3, 0.6])),
            CMatrix::zeros(2, 2),
        );
        assert!(matches!(err, Err(BreadthError::KernelRow { row: 1, .. })));
        let g = rotation_set();
        let st = ThreadBatchState::padded(&[c(1.0, 0.0)], 2, 0).unwrap();
        assert!(matches!(
            evolve_thread(&st, &g, 1.0, 3, 0, 0),
            Err(BreadthError::SwitchStepTooLarge(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{
            "generators": [[[[0,0],[-1,0]],[[1,0],[0,0]]], [[[0,1],[0,0]],[[0,0],[0,-1]]]],
            "switch_rate": 2.0,
            "switch_kernel": {"kind": "matrix", "rows": [[0.0, 1.0], [1.0, 0.0]]},
            "diffusion": [[[0,0.2],[0,0]],[[0,0],[0,-0.1]]]
        }"#;
        let g = SwitchingGeneratorSet::from_json(text).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.generators[1][(0, 0)], c(0.0, 1.0));
        let again = SwitchingGeneratorSet::from_json(&g.to_json()).unwrap();
        assert_eq!(g, again);
        let bad = text.replace("\"switch_rate\"", "\"extra\": 1, \"switch_rate\"");
        assert!(SwitchingGeneratorSet::from_json(&bad).is_err());
    }

    #[test]
    fn zero_generators_keep_everything_fixed() {
        let g = SwitchingGeneratorSet::new(
            vec![CMatrix::zeros(3, 3)],
            0.5,
            SwitchKernel::Matrix(DMatrix::from_element(1, 1, 1.0)),
            CMatrix::zeros(3, 3),
        )
        .unwrap();
        let st = ThreadBatchState::padded(&[c(0.3, 0.1), c(-0.2, 0.5)], 3, 0).unwrap();
        let path = evolve_thread(&st, &g, 0.01, 50, 4, 0).unwrap();
        assert!(path.psi.iter().all(|p| *p == st.psi));
        let rho0 = density_from_states(std::slice::from_ref(&st.psi)).unwrap();
        let p = evolve_density_stochastic(&rho0, &g, &[0; 50], 0.01, 50, 4, 0).unwrap();
        assert!(p.rho.iter().all(|r| *r == rho0.rho));
    }

    #[test]
    fn mc_accumulator_is_chunking_invariant() {
        let g = SwitchingGeneratorSet::new(
            vec![CMatrix::zeros(2, 2)],
            0.5,
            SwitchKernel::Matrix(DMatrix::from_element(1, 1, 1.0)),
            CMatrix::from_row_slice(2, 2, &[c(0.0, 0.3), c(0.1, 0.0), c(-0.1, 0.0), c(0.0, 0.0)]),
        )
        .unwrap();
        let rho0 = DensityMatrix {
            rho: CMatrix::identity(2, 2) * c(0.5, 0.0),
        };
        let a = mc_density_paths(&rho0, &g, 0, 0.01, 20, 9, 0, 600).unwrap();
        let mut b = mc_density_paths(&rho0, &g, 0, 0.01, 20, 9, 0, 300).unwrap();
        b.merge(&mc_density_paths(&rho0, &g, 0, 0.01, 20, 9, 300, 300).unwrap());
        assert!((a.mean() - b.mean()).norm() < 1e-14);
        // The same increments drive a single explicit path.
        let single = evolve_density_stochastic(&rho0, &g, &[0; 20], 0.01, 20, 9, 0).unwrap();
        let one = mc_density_paths(&rho0, &g, 0, 0.01, 20, 9, 0, 1).unwrap();
        assert_eq!(one.mean(), *single.last());
    }

    #[test]
    fn piecewise_schedule_lookup() {
        let s = PhiSchedule::Piecewise {
            segments: vec![(0.0, 1), (0.5, 0)],
        };
        assert_eq!(s.at(0.2), 1);
        assert_eq!(s.at(0.5), 0);
        assert_eq!(s.at(3.0), 0);
    }
}
