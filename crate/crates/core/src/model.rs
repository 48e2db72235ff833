// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Model declaration: domain box, velocity-field families, transition-kernel
//! families, renewal rate and initial density.
//!
//! A [`ModelSpec`] is plain data. It is loaded from JSON, checked with
//! [`validate_model`], and afterwards only read. Every evaluation routine is a
//! pure function of the model and its arguments.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest supported thought-space dimension.
pub const MAX_DIM: usize = 3;

/// Fixed-size coordinate buffer. Coordinates beyond the model dimension are
/// kept at zero and never read.
pub type Vec3 = [f64; MAX_DIM];

/// Tolerance for the kernel normalisation check in [`validate_model`].
pub const KERNEL_NORMALIZATION_TOL: f64 = 1e-9;

/// Minimum number of lattice points used for kernel checks.
pub const VALIDATION_LATTICE_POINTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("renewal rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("kernel normalisation error {max_error:.3e} exceeds {KERNEL_NORMALIZATION_TOL:e}")]
    KernelNormalization { max_error: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("point {coords:?} lies outside the domain box")]
    OutOfDomain { coords: Vec<f64> },
    #[error("cognitive index {index} out of range for |Y| = {size}")]
    BadCognitiveIndex { index: usize, size: usize },
    #[error("could not parse model: {0}")]
    Parse(String),
    #[error("unknown keys in strict mode: {0:?}")]
    UnknownKeys(Vec<String>),
}

/// A point `x` of the thought space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThoughtPoint {
    pub coords: Vec3,
}

impl ThoughtPoint {
    /// Builds a point from up to three coordinates.
    pub fn new(coords: &[f64]) -> Self {
        assert!(coords.len() <= MAX_DIM, "at most {MAX_DIM} coordinates");
        let mut c = [0.0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Self { coords: c }
    }

    pub fn from_array(coords: Vec3) -> Self {
        Self { coords }
    }

    pub fn slice(&self, dim: usize) -> &[f64] {
        &self.coords[..dim]
    }

    pub fn distance(&self, other: &ThoughtPoint) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A state `y` of the finite cognitive space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CognitiveIndex(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: Vec<f64>,
}

/// Velocity field families, one parameter set per cognitive state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityField {
    /// `v(x, y) = c_y`.
    Constant { vectors: Vec<Vec<f64>> },
    /// `v(x, y) = M_y x + b_y`.
    Linear {
        matrices: Vec<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offsets: Option<Vec<Vec<f64>>>,
    },
    /// `v(x, y) = sum_k a_k exp(-|x - c_k|^2 / (2 w_k^2))`.
    GaussianBumps { bumps: Vec<Vec<Bump>> },
}

/// Transition kernel `psi(x, y)` families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransitionKernel {
    Uniform,
    PointMass { target: usize },
    /// `psi(x, y) ∝ exp(-beta |x - c_y|^2)`.
    Softmax { centers: Vec<Vec<f64>>, beta: f64 },
    /// State-independent weights, taken as given (not renormalised).
    Weights { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    /// Uniform on a sub-box (defaults to the whole domain).
    UniformBox {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lo: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hi: Option<Vec<f64>>,
    },
    /// Axis-aligned Gaussian truncated to the domain box.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Point { x: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOrigin {
    /// The cognition takes its first jump at `t = 0`.
    #[default]
    JumpAtZero,
    /// Long-time regime; no atom at `tau = t` is tracked.
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Leaving the box is an error.
    #[default]
    Strict,
    /// Points are clamped back onto the box.
    Clamp,
    /// The box is a torus. Intended for translation-field tests.
    Periodic,
}

/// Smooth cut-off that makes the field vanish within `margin` of the boundary
/// and reach full strength at `margin + ramp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportDamping {
    pub margin: f64,
    pub ramp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub domain: DomainBox,
    pub cognitive_size: usize,
    pub velocity: VelocityField,
    pub kernel: TransitionKernel,
    pub lambda: f64,
    pub initial: InitialDensity,
    #[serde(default)]
    pub time_origin: TimeOrigin,
    #[serde(default)]
    pub boundary: BoundaryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_damping: Option<SupportDamping>,
}

impl ModelSpec {
    /// Parses a JSON model. In strict mode any key not in the schema is an
    /// error; otherwise unknown keys are ignored.
    pub fn from_json(text: &str, strict: bool) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        Self::from_value(value, strict)
    }

    pub fn from_value(value: serde_json::Value, strict: bool) -> Result<Self, ModelError> {
        let value = if strict {
            value
        } else {
            strip_unknown_model_keys(value)
        };
        serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            if msg.starts_with("unknown field") {
                ModelError::UnknownKeys(vec![msg])
            } else {
                ModelError::Parse(msg)
            }
        })
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn model_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model spec serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn lo(&self) -> Vec3 {
        to_vec3(&self.domain.lo)
    }

    pub fn hi(&self) -> Vec3 {
        to_vec3(&self.domain.hi)
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..self.dim).all(|i| x[i] >= self.domain.lo[i] && x[i] <= self.domain.hi[i])
    }

    pub fn clamp(&self, x: &Vec3) -> Vec3 {
        let mut out = *x;
        for (i, v) in out.iter_mut().enumerate().take(self.dim) {
            *v = v.clamp(self.domain.lo[i], self.domain.hi[i]);
        }
        out
    }

    pub fn wrap(&self, x: &Vec3) -> Vec3 {
        let mut out = *x;
        for (i, v) in out.iter_mut().enumerate().take(self.dim) {
            let lo = self.domain.lo[i];
            let len = self.domain.hi[i] - lo;
            *v = lo + (*v - lo).rem_euclid(len);
        }
        out
    }

    /// Applies the boundary policy to a point produced by an integrator.
    /// Returns `None` when the point left the box in strict mode.
    pub fn enforce_boundary(&self, x: &Vec3) -> Option<Vec3> {
        match self.boundary {
            BoundaryMode::Strict => self.contains(x).then_some(*x),
            BoundaryMode::Clamp => Some(self.clamp(x)),
            BoundaryMode::Periodic => Some(self.wrap(x)),
        }
    }

    /// Maps a user-supplied evaluation point onto the domain according to the
    /// boundary policy, rejecting it in strict mode.
    fn admit(&self, x: &ThoughtPoint) -> Result<Vec3, ModelError> {
        self.enforce_boundary(&x.coords).ok_or_else(|| ModelError::OutOfDomain {
            coords: x.coords[..self.dim].to_vec(),
        })
    }

    fn check_index(&self, y: CognitiveIndex) -> Result<(), ModelError> {
        if y.0 < self.cognitive_size {
            Ok(())
        } else {
            Err(ModelError::BadCognitiveIndex {
                index: y.0,
                size: self.cognitive_size,
            })
        }
    }

    /// Raw field value, damping included, with no domain checks. Defined for
    /// every point of `R^d` so that integrator stages may step outside.
    pub fn velocity_at(&self, x: &Vec3, y: usize) -> Vec3 {
        let d = self.dim;
        let mut v = [0.0; MAX_DIM];
        match &self.velocity {
            VelocityField::Constant { vectors } => {
                v[..d].copy_from_slice(&vectors[y][..d]);
            }
            VelocityField::Linear { matrices, offsets } => {
                let m = &matrices[y];
                for i in 0..d {
                    v[i] = (0..d).map(|j| m[i][j] * x[j]).sum();
                }
                if let Some(b) = offsets {
                    for i in 0..d {
                        v[i] += b[y][i];
                    }
                }
            }
            VelocityField::GaussianBumps { bumps } => {
                for bump in &bumps[y] {
                    let r2: f64 = (0..d).map(|i| (x[i] - bump.center[i]).powi(2)).sum();
                    let g = (-r2 / (2.0 * bump.width * bump.width)).exp();
                    for i in 0..d {
                        v[i] += bump.amplitude[i] * g;
                    }
                }
            }
        }
        if let Some(damp) = &self.support_damping {
            let f = self.damping_factor(x, damp);
            for c in v.iter_mut().take(d) {
                *c *= f;
            }
        }
        v
    }

    fn damping_factor(&self, x: &Vec3, damp: &SupportDamping) -> f64 {
        (0..self.dim)
            .map(|i| {
                let dist = (x[i] - self.domain.lo[i]).min(self.domain.hi[i] - x[i]);
                let s = ((dist - damp.margin) / damp.ramp).clamp(0.0, 1.0);
                s * s * (3.0 - 2.0 * s)
            })
            .product()
    }

    /// Central-difference divergence of `v(., y)` at `x`.
    pub fn divergence(&self, x: &Vec3, y: usize, h: f64) -> f64 {
        let mut div = 0.0;
        for i in 0..self.dim {
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += h;
            xm[i] -= h;
            div += (self.velocity_at(&xp, y)[i] - self.velocity_at(&xm, y)[i]) / (2.0 * h);
        }
        div
    }

    /// Raw kernel vector `psi(x, .)` written into `out` (length `|Y|`).
    pub fn kernel_into(&self, x: &Vec3, out: &mut [f64]) {
        match &self.kernel {
            TransitionKernel::Uniform => out.fill(1.0 / self.cognitive_size as f64),
            TransitionKernel::PointMass { target } => {
                out.fill(0.0);
                out[*target] = 1.0;
            }
            TransitionKernel::Weights { weights } => out.copy_from_slice(weights),
            TransitionKernel::Softmax { centers, beta } => {
                for (o, c) in out.iter_mut().zip(centers) {
                    let r2: f64 = (0..self.dim).map(|i| (x[i] - c[i]).powi(2)).sum();
                    *o = -beta * r2;
                }
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for o in out.iter_mut() {
                    *o = (*o - max).exp();
                    total += *o;
                }
                for o in out.iter_mut() {
                    *o /= total;
                }
            }
        }
    }

    /// Single kernel entry `psi(x, y)`.
    pub fn kernel_prob(&self, x: &Vec3, y: usize) -> f64 {
        match &self.kernel {
            TransitionKernel::Uniform => 1.0 / self.cognitive_size as f64,
            TransitionKernel::PointMass { target } => f64::from(u8::from(*target == y)),
            TransitionKernel::Weights { weights } => weights[y],
            TransitionKernel::Softmax { .. } => {
                let mut buf = vec![0.0; self.cognitive_size];
                self.kernel_into(x, &mut buf);
                buf[y]
            }
        }
    }

    /// Lipschitz constant of `x -> psi(x, y)` (max over `y`, Euclidean norm
    /// in `x`). Constant kernels have zero; for the softmax family
    /// `|grad psi_y| <= 2 beta max_k |c_y - c_k|`.
    pub fn kernel_lipschitz(&self) -> f64 {
        match &self.kernel {
            TransitionKernel::Softmax { centers, beta } => {
                let mut diam: f64 = 0.0;
                for a in centers {
                    for b in centers {
                        let d2: f64 = (0..self.dim).map(|i| (a[i] - b[i]).powi(2)).sum();
                        diam = diam.max(d2.sqrt());
                    }
                }
                2.0 * beta.abs() * diam
            }
            _ => 0.0,
        }
    }

    /// Deterministic lattice with at least [`VALIDATION_LATTICE_POINTS`]
    /// points spanning the box (boundaries included). Returns the points and
    /// the per-axis spacing.
    pub fn lattice(&self) -> (Vec<Vec3>, Vec3) {
        let per_axis = (VALIDATION_LATTICE_POINTS as f64)
            .powf(1.0 / self.dim as f64)
            .ceil() as usize;
        let per_axis = per_axis.max(2);
        let mut spacing = [0.0; MAX_DIM];
        for (i, s) in spacing.iter_mut().enumerate().take(self.dim) {
            *s = (self.domain.hi[i] - self.domain.lo[i]) / (per_axis - 1) as f64;
        }
        let total = per_axis.pow(self.dim as u32);
        let points = (0..total)
            .map(|mut k| {
                let mut p = [0.0; MAX_DIM];
                for i in 0..self.dim {
                    p[i] = self.domain.lo[i] + (k % per_axis) as f64 * spacing[i];
                    k /= per_axis;
                }
                p
            })
            .collect();
        (points, spacing)
    }
}

fn to_vec3(v: &[f64]) -> Vec3 {
    let mut out = [0.0; MAX_DIM];
    out[..v.len().min(MAX_DIM)].copy_from_slice(&v[..v.len().min(MAX_DIM)]);
    out
}

/// Drops keys that are not part of the model schema. Only used for lenient
/// loading; nested family objects are filtered by their tag.
fn strip_unknown_model_keys(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    fn keep(obj: &mut serde_json::Map<String, Value>, keys: &[&str]) {
        obj.retain(|k, _| keys.contains(&k.as_str()));
    }
    let Value::Object(mut top) = value else {
        return value;
    };
    keep(
        &mut top,
        &[
            "dim",
            "domain",
            "cognitive_size",
            "velocity",
            "kernel",
            "lambda",
            "initial",
            "time_origin",
            "boundary",
            "support_damping",
        ],
    );
    if let Some(Value::Object(d)) = top.get_mut("domain") {
        keep(d, &["lo", "hi"]);
    }
    if let Some(Value::Object(d)) = top.get_mut("support_damping") {
        keep(d, &["margin", "ramp"]);
    }
    if let Some(Value::Object(v)) = top.get_mut("velocity") {
        keep(v, &["family", "vectors", "matrices", "offsets", "bumps"]);
    }
    if let Some(Value::Object(k)) = top.get_mut("kernel") {
        keep(k, &["family", "target", "centers", "beta", "weights"]);
    }
    if let Some(Value::Object(k)) = top.get_mut("initial") {
        keep(k, &["kind", "lo", "hi", "mean", "std", "x"]);
    }
    Value::Object(top)
}

/// Field value at a point, with the boundary policy applied to `x`.
pub fn eval_velocity(
    spec: &ModelSpec,
    x: ThoughtPoint,
    y: CognitiveIndex,
) -> Result<Vec<f64>, ModelError> {
    spec.check_index(y)?;
    let x = spec.admit(&x)?;
    Ok(spec.velocity_at(&x, y.0)[..spec.dim].to_vec())
}

/// Probability vector `psi(x, .)` over the cognitive space.
pub fn eval_kernel(spec: &ModelSpec, x: ThoughtPoint) -> Result<Vec<f64>, ModelError> {
    let x = spec.admit(&x)?;
    let mut out = vec![0.0; spec.cognitive_size];
    spec.kernel_into(&x, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
    /// Largest `|sum_y psi(x, y) - 1|` seen on the lattice.
    pub max_normalization_error: f64,
    pub lattice_points: usize,
    #[serde(skip)]
    errors: Vec<ModelError>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn errors(&self) -> &[ModelError] {
        &self.errors
    }

    /// First failure as an error, if any.
    pub fn into_result(self) -> Result<(), ModelError> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn record(&mut self, name: &str, outcome: Result<String, ModelError>) {
        let (passed, detail) = match outcome {
            Ok(detail) => (true, detail),
            Err(e) => {
                let detail = e.to_string();
                self.errors.push(e);
                (false, detail)
            }
        };
        self.checks.push(ValidationCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

fn expect_len(what: &str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::LengthMismatch {
            what: what.to_string(),
            expected,
            found,
        })
    }
}

fn check_structure(spec: &ModelSpec) -> Result<String, ModelError> {
    if !(1..=MAX_DIM).contains(&spec.dim) {
        return Err(ModelError::InvalidParameter(format!(
            "dimension {} not in 1..={MAX_DIM}",
            spec.dim
        )));
    }
    if spec.cognitive_size == 0 {
        return Err(ModelError::InvalidParameter(
            "cognitive space must be non-empty".into(),
        ));
    }
    let d = spec.dim;
    expect_len("domain.lo", d, spec.domain.lo.len())?;
    expect_len("domain.hi", d, spec.domain.hi.len())?;
    for i in 0..d {
        if !(spec.domain.lo[i] < spec.domain.hi[i]) {
            return Err(ModelError::InvalidParameter(format!(
                "domain axis {i} is empty: [{}, {}]",
                spec.domain.lo[i], spec.domain.hi[i]
            )));
        }
    }
    let ny = spec.cognitive_size;
    match &spec.velocity {
        VelocityField::Constant { vectors } => {
            expect_len("velocity.vectors", ny, vectors.len())?;
            for v in vectors {
                expect_len("velocity.vectors[y]", d, v.len())?;
            }
        }
        VelocityField::Linear { matrices, offsets } => {
            expect_len("velocity.matrices", ny, matrices.len())?;
            for m in matrices {
                expect_len("velocity.matrices[y]", d, m.len())?;
                for row in m {
                    expect_len("velocity.matrices[y][i]", d, row.len())?;
                }
            }
            if let Some(b) = offsets {
                expect_len("velocity.offsets", ny, b.len())?;
                for v in b {
                    expect_len("velocity.offsets[y]", d, v.len())?;
                }
            }
        }
        VelocityField::GaussianBumps { bumps } => {
            expect_len("velocity.bumps", ny, bumps.len())?;
            for list in bumps {
                for b in list {
                    expect_len("bump.center", d, b.center.len())?;
                    expect_len("bump.amplitude", d, b.amplitude.len())?;
                    if !(b.width > 0.0) {
                        return Err(ModelError::InvalidParameter(format!(
                            "bump width must be positive, got {}",
                            b.width
                        )));
                    }
                }
            }
        }
    }
    match &spec.kernel {
        TransitionKernel::Uniform => {}
        TransitionKernel::PointMass { target } => {
            if *target >= ny {
                return Err(ModelError::BadCognitiveIndex {
                    index: *target,
                    size: ny,
                });
            }
        }
        TransitionKernel::Softmax { centers, beta } => {
            expect_len("kernel.centers", ny, centers.len())?;
            for c in centers {
                expect_len("kernel.centers[y]", d, c.len())?;
            }
            if !(*beta >= 0.0) {
                return Err(ModelError::InvalidParameter(format!(
                    "softmax inverse temperature must be >= 0, got {beta}"
                )));
            }
        }
        TransitionKernel::Weights { weights } => {
            expect_len("kernel.weights", ny, weights.len())?;
        }
    }
    match &spec.initial {
        InitialDensity::UniformBox { lo, hi } => {
            for (name, v) in [("initial.lo", lo), ("initial.hi", hi)] {
                if let Some(v) = v {
                    expect_len(name, d, v.len())?;
                }
            }
        }
        InitialDensity::Gaussian { mean, std } => {
            expect_len("initial.mean", d, mean.len())?;
            expect_len("initial.std", d, std.len())?;
            if std.iter().any(|s| !(*s > 0.0)) {
                return Err(ModelError::InvalidParameter(
                    "initial std must be positive".into(),
                ));
            }
        }
        InitialDensity::Point { x } => {
            expect_len("initial.x", d, x.len())?;
            if !spec.contains(&to_vec3(x)) {
                return Err(ModelError::OutOfDomain { coords: x.clone() });
            }
        }
    }
    if let Some(damp) = &spec.support_damping {
        if !(damp.margin >= 0.0 && damp.ramp > 0.0) {
            return Err(ModelError::InvalidParameter(
                "support damping needs margin >= 0 and ramp > 0".into(),
            ));
        }
    }
    Ok(format!("dim {d}, |Y| = {ny}"))
}

/// Checks every structural and numerical invariant of a model.
///
/// The kernel is checked on a deterministic lattice of at least 1000 points:
/// each `psi(x, .)` must be non-negative and sum to one within
/// [`KERNEL_NORMALIZATION_TOL`], and adjacent lattice points must respect the
/// family's Lipschitz bound.
pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport {
        checks: Vec::new(),
        max_normalization_error: f64::NAN,
        lattice_points: 0,
        errors: Vec::new(),
    };
    let rate = if spec.lambda > 0.0 && spec.lambda.is_finite() {
        Ok(format!("lambda = {}", spec.lambda))
    } else {
        Err(ModelError::NonPositiveRate(spec.lambda))
    };
    report.record("renewal-rate", rate);
    let structure = check_structure(spec);
    let structure_ok = structure.is_ok();
    report.record("structure", structure);
    if !structure_ok {
        return report;
    }

    let (points, spacing) = spec.lattice();
    report.lattice_points = points.len();
    let ny = spec.cognitive_size;
    let mut psi = vec![0.0; ny];
    let mut max_err: f64 = 0.0;
    let mut min_val = f64::INFINITY;
    for p in &points {
        spec.kernel_into(p, &mut psi);
        let total: f64 = psi.iter().sum();
        max_err = max_err.max((total - 1.0).abs());
        min_val = psi.iter().cloned().fold(min_val, f64::min);
    }
    report.max_normalization_error = max_err;
    let norm = if max_err <= KERNEL_NORMALIZATION_TOL {
        Ok(format!("max |sum psi - 1| = {max_err:.3e}"))
    } else {
        Err(ModelError::KernelNormalization { max_error: max_err })
    };
    report.record("kernel-normalization", norm);
    let nonneg = if min_val >= 0.0 {
        Ok(format!("min psi = {min_val:.3e}"))
    } else {
        Err(ModelError::InvalidParameter(format!(
            "negative kernel value {min_val}"
        )))
    };
    report.record("kernel-nonnegative", nonneg);

    // Lipschitz check between lattice neighbours along each axis.
    let lip = spec.kernel_lipschitz();
    let mut worst_ratio: f64 = 0.0;
    let mut other = vec![0.0; ny];
    for p in &points {
        spec.kernel_into(p, &mut psi);
        for i in 0..spec.dim {
            let mut q = *p;
            q[i] += spacing[i];
            if q[i] > spec.domain.hi[i] + 1e-12 {
                continue;
            }
            spec.kernel_into(&q, &mut other);
            let jump = psi
                .iter()
                .zip(&other)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let bound = lip * spacing[i] + 1e-12;
            worst_ratio = worst_ratio.max(jump / bound);
        }
    }
    let cont = if worst_ratio <= 1.0 {
        Ok(format!("Lipschitz bound L = {lip:.4} respected"))
    } else {
        Err(ModelError::InvalidParameter(format!(
            "kernel varies faster than its Lipschitz bound {lip} (ratio {worst_ratio:.3})"
        )))
    };
    report.record("kernel-continuity", cont);
    report
}
