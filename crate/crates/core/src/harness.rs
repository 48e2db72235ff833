// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Configuration-driven experiment runner.
//!
//! A run reads one JSON file, validates every parameter up front, then
//! executes the stages the command asks for and writes its artifacts plus a
//! `manifest.json` with digests of everything it wrote. Configuration errors
//! are raised before the output directory is touched.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::breadth::{
    density_from_states, density_path_csv, evolve_density_driven, evolve_density_expected,
    evolve_thread, evolve_thread_driven, mc_density_paths, vector_from_json, CMatrix, CVector,
    DensityPath, PhiSchedule, SwitchingGeneratorSet, ThreadBatchState,
};
use crate::density::{estimate_density, DensityHistory, GridConfig, XGrid, XMarginal};
use crate::export::{
    write_grid_csv, write_history_csv, write_jump_log_csv, write_report, write_snapshot_csv,
    ExportFormat,
};
use crate::flow::DEFAULT_H_DIV;
use crate::model::{validate_model, ModelSpec, TimeOrigin};
use crate::sim::{advance_continuous_to, sample_initial, step_discrete_in_place, EnsembleSnapshot};
use crate::verify::{
    compare_rhs_forms, continuity_residual_paired, kernel_equation_check, AtomReport,
    ContinuityOptions, FormComparison, KernelCheckConfig, RhsOptions, DEFAULT_K_NOISE,
};

/// Environment variable consulted when no worker count is given.
pub const WORKERS_ENV: &str = "COGFLOW_WORKERS";

/// Largest L1 distance between the two kernel forms accepted by the `forms`
/// check.
pub const FORMS_TOLERANCE: f64 = 1e-6;

/// Largest Hermiticity defect accepted along breadth paths.
pub const HERMITICITY_TOLERANCE: f64 = 1e-9;

/// Multiple of the Monte Carlo standard error accepted by the breadth mean
/// check.
pub const MC_K: f64 = 3.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Runtime { stage: String, message: String },
}

impl HarnessError {
    fn runtime(stage: &str, e: impl std::fmt::Display) -> Self {
        HarnessError::Runtime {
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub particles: usize,
    pub horizon: f64,
    /// RK4 step of the flow.
    pub step: f64,
    /// Cadence of stored thought marginals.
    pub store_every: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: SimMode,
    /// Time step of the discrete model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete_dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Joint density against the renewal representation.
    Kernel,
    /// Continuity law of the thought marginal.
    Continuity,
    /// Never-jumped fraction against the candidate coefficients.
    Atom,
    /// Distance between the jump-at-zero and stationary forms.
    Forms,
}

fn default_checks() -> Vec<CheckKind> {
    vec![CheckKind::Kernel, CheckKind::Continuity]
}

fn default_k_noise() -> f64 {
    DEFAULT_K_NOISE
}

fn default_continuity_dt() -> f64 {
    0.01
}

fn default_h_div() -> f64 {
    DEFAULT_H_DIV
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_checks")]
    pub checks: Vec<CheckKind>,
    pub x_bins: Vec<usize>,
    pub tau_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<f64>,
    #[serde(default = "default_k_noise")]
    pub k_noise: f64,
    #[serde(default = "default_continuity_dt")]
    pub continuity_dt: f64,
    #[serde(default = "default_h_div")]
    pub h_div: f64,
}

impl VerifyConfig {
    pub fn grid(&self) -> GridConfig {
        GridConfig {
            x_bins: self.x_bins.clone(),
            tau_bins: self.tau_bins,
            tau_max: self.tau_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreadthConfig {
    pub generators: SwitchingGeneratorSet,
    /// Active thread amplitudes, zero-padded to the generator size.
    pub initial_states: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub phi0: usize,
    pub dt: f64,
    pub steps: usize,
    /// Schedule of the expected equation; defaults to `phi0` throughout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PhiSchedule>,
    /// Monte Carlo paths for the mean check (0 disables it).
    #[serde(default)]
    pub mc_paths: u64,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<ExportFormat> {
    vec![ExportFormat::Csv, ExportFormat::Json]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ExportFormat>,
    #[serde(default = "yes")]
    pub dump_snapshot: bool,
    #[serde(default)]
    pub dump_jumps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
            dump_snapshot: true,
            dump_jumps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "yes")]
    strict: bool,
    model: serde_json::Value,
    run: RunConfig,
    #[serde(default)]
    verify: Option<VerifyConfig>,
    #[serde(default)]
    breadth: Option<BreadthConfig>,
    #[serde(default)]
    output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Reject unknown keys in the model section.
    pub strict: bool,
    pub model: ModelSpec,
    pub run: RunConfig,
    pub verify: Option<VerifyConfig>,
    pub breadth: Option<BreadthConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses and validates a configuration.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let model = ModelSpec::from_value(raw.model, raw.strict)
            .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        let cfg = Self {
            strict: raw.strict,
            model,
            run: raw.run,
            verify: raw.verify,
            breadth: raw.breadth,
            output: raw.output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form (after overrides).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configs always serialize");
        hex::encode(Sha256::digest(bytes))
    }

    /// Checks every numeric parameter against the preconditions of the
    /// stages that will use it.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut errs: Vec<String> = validate_model(&self.model)
            .errors()
            .iter()
            .map(|e| format!("model: {e}"))
            .collect();
        let r = &self.run;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if r.particles == 0 {
            errs.push("run.particles must be at least 1".into());
        }
        if !positive(r.horizon) {
            errs.push(format!("run.horizon must be positive, got {}", r.horizon));
        }
        if !positive(r.step) {
            errs.push(format!("run.step must be positive, got {}", r.step));
        }
        if !positive(r.store_every) {
            errs.push(format!("run.store_every must be positive, got {}", r.store_every));
        } else if !is_multiple(r.horizon, r.store_every) {
            errs.push("run.horizon must be a whole multiple of run.store_every".into());
        }
        if r.mode == SimMode::Discrete {
            match r.discrete_dt {
                None => errs.push("run.discrete_dt is required in discrete mode".into()),
                Some(dt) if !positive(dt) => errs.push(format!("run.discrete_dt must be positive, got {dt}")),
                Some(dt) => {
                    if self.model.lambda * dt >= 1.0 {
                        errs.push(format!(
                            "lambda * discrete_dt = {} must be below 1",
                            self.model.lambda * dt
                        ));
                    }
                    if !is_multiple(r.store_every, dt) {
                        errs.push("run.store_every must be a whole multiple of run.discrete_dt".into());
                    }
                }
            }
        }
        if let Some(v) = &self.verify {
            if r.mode == SimMode::Discrete && !v.checks.is_empty() {
                errs.push("verification checks apply to the continuous model only".into());
            }
            if v.x_bins.len() != self.model.dim {
                errs.push(format!(
                    "verify.x_bins has {} entries for dimension {}",
                    v.x_bins.len(),
                    self.model.dim
                ));
            }
            if v.x_bins.iter().any(|&b| b < 3) {
                errs.push("verify.x_bins must be at least 3 so interior cells exist".into());
            }
            if v.tau_bins == 0 {
                errs.push("verify.tau_bins must be at least 1".into());
            }
            if let Some(tm) = v.tau_max {
                if !(tm >= r.horizon) {
                    errs.push(format!("verify.tau_max {tm} must cover the horizon {}", r.horizon));
                }
            }
            if !positive(v.k_noise) {
                errs.push("verify.k_noise must be positive".into());
            }
            if !positive(v.continuity_dt) {
                errs.push("verify.continuity_dt must be positive".into());
            }
            if !positive(v.h_div) {
                errs.push("verify.h_div must be positive".into());
            }
            if v.checks.contains(&CheckKind::Atom) && self.model.time_origin != TimeOrigin::JumpAtZero {
                errs.push("the atom check needs time_origin jump_at_zero".into());
            }
        }
        if let Some(b) = &self.breadth {
            let n = b.generators.dim();
            if b.initial_states.is_empty() {
                errs.push("breadth.initial_states must not be empty".into());
            }
            if b.initial_states.iter().any(|s| s.len() > n) {
                errs.push(format!("breadth.initial_states longer than the generator size {n}"));
            }
            if b.phi0 >= b.generators.len() {
                errs.push(format!("breadth.phi0 {} out of range", b.phi0));
            }
            if !positive(b.dt) {
                errs.push("breadth.dt must be positive".into());
            } else if b.generators.switch_rate * b.dt >= 1.0 {
                errs.push(format!(
                    "switch_rate * dt = {} must be below 1",
                    b.generators.switch_rate * b.dt
                ));
            }
            if b.steps == 0 {
                errs.push("breadth.steps must be at least 1".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errs.join("; ")))
        }
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    let k = a / b;
    k >= 1.0 - 1e-9 && (k - k.round()).abs() < 1e-9
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    VerificationFailed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub command: Command,
    pub config_digest: String,
    pub code_version: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
    pub files: Vec<FileRecord>,
    pub checks: Vec<CheckSummary>,
}

impl RunManifest {
    /// Process exit code: 0 ok, 1 verification failure, 3 runtime error.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Ok => 0,
            RunStatus::VerificationFailed => 1,
            RunStatus::Failed => 3,
        }
    }
}

/// Exit code of a harness outcome; configuration errors map to 2.
pub fn exit_code(outcome: &Result<RunManifest, HarnessError>) -> i32 {
    match outcome {
        Ok(m) => m.exit_code(),
        Err(HarnessError::Config(_)) => 2,
        Err(HarnessError::Runtime { .. }) => 3,
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Simulate and dump the ensemble.
    Simulate,
    /// Simulate, estimate and run the configured checks.
    Verify,
    /// Run the breadth section only.
    Breadth,
    /// Simulate and write plot-ready grids.
    Export,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Breadth => "breadth",
            Command::Export => "export",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

/// Worker count from the flag, else from `COGFLOW_WORKERS`, else the
/// number of available cores.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize, HarnessError> {
    if let Some(w) = flag {
        return if w == 0 {
            Err(HarnessError::Config("worker count must be at least 1".into()))
        } else {
            Ok(w)
        };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(HarnessError::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Writer that hashes and counts what passes through it.
struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

impl Outputs {
    fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> Result<(), String>,
    ) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| HarnessError::runtime("output", e))?;
        let mut w = HashingWriter {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
            bytes: 0,
        };
        body(&mut w).map_err(|e| HarnessError::runtime("output", e))?;
        w.flush().map_err(|e| HarnessError::runtime("output", e))?;
        self.files.push(FileRecord {
            name: name.to_string(),
            bytes: w.bytes,
            sha256: hex::encode(w.hasher.finalize()),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| e.to_string())?;
            writeln!(w).map_err(|e| e.to_string())
        })
    }
}

struct RunState<'a> {
    cfg: &'a ExperimentConfig,
    out: Outputs,
    stages: Vec<StageTiming>,
    checks: Vec<CheckSummary>,
}

impl RunState<'_> {
    fn timed<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T, HarnessError>,
    ) -> Result<T, HarnessError> {
        let start = Instant::now();
        let r = f(self);
        self.stages.push(StageTiming {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        r
    }

    fn wants(&self, f: ExportFormat) -> bool {
        self.cfg.output.formats.contains(&f)
    }
}

/// Result of the simulation stage.
struct Simulated {
    snapshot: EnsembleSnapshot,
    history: Option<DensityHistory>,
}

fn simulate_stage(st: &mut RunState<'_>, keep_history: bool) -> Result<Simulated, HarnessError> {
    let cfg = st.cfg;
    let spec = &cfg.model;
    let run = &cfg.run;
    let err = |e: &dyn std::fmt::Display| HarnessError::runtime("simulate", e);
    let mut snap = sample_initial(spec, run.particles, run.seed).map_err(|e| err(&e))?;
    let x_bins = cfg.verify.as_ref().map(|v| v.x_bins.clone());
    let mut history = match (&x_bins, keep_history) {
        (Some(_), true) => Some(DensityHistory::new(run.store_every)),
        _ => None,
    };
    let record = |h: &mut Option<DensityHistory>, s: &EnsembleSnapshot| -> Result<(), HarnessError> {
        if let (Some(h), Some(b)) = (h.as_mut(), x_bins.as_ref()) {
            h.push(XMarginal::estimate(spec, s, b).map_err(|e| HarnessError::runtime("simulate", e))?);
        }
        Ok(())
    };
    record(&mut history, &snap)?;
    let segments = (run.horizon / run.store_every).round() as usize;
    let mut jumps = Vec::new();
    for k in 1..=segments {
        let t_k = if k == segments {
            run.horizon
        } else {
            k as f64 * run.store_every
        };
        match run.mode {
            SimMode::Continuous => {
                let ev = advance_continuous_to(spec, &mut snap, t_k, run.step, cfg.output.dump_jumps)
                    .map_err(|e| err(&e))?;
                jumps.extend(ev);
            }
            SimMode::Discrete => {
                let dt = run.discrete_dt.expect("validated");
                let n = ((t_k - snap.t) / dt).round() as usize;
                for _ in 0..n {
                    step_discrete_in_place(spec, &mut snap, dt).map_err(|e| err(&e))?;
                }
            }
        }
        record(&mut history, &snap)?;
    }
    let dim = spec.dim;
    if cfg.output.dump_snapshot && st.wants(ExportFormat::Csv) {
        st.out.write("snapshot.csv", |w| {
            write_snapshot_csv(w, &snap, dim).map_err(|e| e.to_string())
        })?;
    }
    if cfg.output.dump_jumps && st.wants(ExportFormat::Csv) {
        st.out.write("jumps.csv", |w| {
            write_jump_log_csv(w, &jumps, dim).map_err(|e| e.to_string())
        })?;
    }
    Ok(Simulated {
        snapshot: snap,
        history,
    })
}

fn grid_stage(st: &mut RunState<'_>, sim: &Simulated, with_history: bool) -> Result<(), HarnessError> {
    let Some(v) = &st.cfg.verify else {
        return Ok(());
    };
    if !st.wants(ExportFormat::Csv) {
        return Ok(());
    }
    let grid = estimate_density(&st.cfg.model, &sim.snapshot, &v.grid())
        .map_err(|e| HarnessError::runtime("estimate", e))?;
    st.out.write("grid.csv", |w| write_grid_csv(w, &grid).map_err(|e| e.to_string()))?;
    if with_history {
        if let Some(h) = &sim.history {
            st.out
                .write("history.csv", |w| write_history_csv(w, h).map_err(|e| e.to_string()))?;
        }
    }
    Ok(())
}

fn verify_stage(st: &mut RunState<'_>, sim: &Simulated) -> Result<(), HarnessError> {
    let cfg = st.cfg;
    let Some(v) = &cfg.verify else {
        return Ok(());
    };
    let spec = &cfg.model;
    let err = |e: &dyn std::fmt::Display| HarnessError::runtime("verify", e);
    let history = sim.history.as_ref().expect("history kept for verification");
    let json = st.wants(ExportFormat::Json);
    for check in &v.checks {
        match check {
            CheckKind::Kernel => {
                let kc = KernelCheckConfig {
                    grid: v.grid(),
                    k_noise: v.k_noise,
                    step: cfg.run.step,
                    h_div: v.h_div,
                };
                let r = kernel_equation_check(spec, history, &sim.snapshot, &kc).map_err(|e| err(&e))?;
                let name = format!("report-{}.json", r.theorem.as_str());
                st.checks.push(CheckSummary {
                    name: r.theorem.as_str().to_string(),
                    pass: r.pass,
                });
                if json {
                    st.out.write(&name, |w| {
                        write_report(&mut *w, &r, ExportFormat::Json).map_err(|e| e.to_string())?;
                        writeln!(w).map_err(|e| e.to_string())
                    })?;
                }
            }
            CheckKind::Continuity => {
                let mut later = sim.snapshot.clone();
                let t2 = later.t + v.continuity_dt;
                advance_continuous_to(spec, &mut later, t2, cfg.run.step, false).map_err(|e| err(&e))?;
                let r = continuity_residual_paired(
                    spec,
                    &sim.snapshot,
                    &later,
                    &v.x_bins,
                    &ContinuityOptions { k_noise: v.k_noise },
                )
                .map_err(|e| err(&e))?;
                st.checks.push(CheckSummary {
                    name: r.theorem.as_str().to_string(),
                    pass: r.pass,
                });
                if json {
                    let name = format!("report-{}.json", r.theorem.as_str());
                    st.out.write(&name, |w| {
                        write_report(&mut *w, &r, ExportFormat::Json).map_err(|e| e.to_string())?;
                        writeln!(w).map_err(|e| e.to_string())
                    })?;
                }
            }
            CheckKind::Atom => {
                let r = AtomReport::from_snapshot(spec, &sim.snapshot).map_err(|e| err(&e))?;
                st.checks.push(CheckSummary {
                    name: "atom".into(),
                    pass: r.consistent_with_total_probability,
                });
                if json {
                    st.out.json("atom.json", &r)?;
                }
            }
            CheckKind::Forms => {
                let x = XGrid::from_spec(spec, &v.x_bins).map_err(|e| err(&e))?;
                let opts = RhsOptions {
                    step: cfg.run.step,
                    h_div: v.h_div,
                    t_start: sim.snapshot.t_start,
                };
                let r: FormComparison =
                    compare_rhs_forms(spec, history, &x, sim.snapshot.t, &opts).map_err(|e| err(&e))?;
                st.checks.push(CheckSummary {
                    name: "forms".into(),
                    pass: r.l1_difference < FORMS_TOLERANCE,
                });
                if json {
                    st.out.json("forms.json", &r)?;
                }
            }
        }
    }
    Ok(())
}

/// Summary of the breadth stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreadthReport {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub steps: usize,
    pub hermiticity_expected: f64,
    pub hermiticity_stochastic: f64,
    pub trace_drift_expected: f64,
    pub trace_drift_stochastic: f64,
    pub trace_drift_threads: f64,
    /// Final Frobenius distance between the thread-built and the directly
    /// integrated density matrix under the same noise.
    pub thread_vs_density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub paths: u64,
    pub distance: f64,
    pub standard_error: f64,
    pub k: f64,
    pub pass: bool,
}

/// Runs the breadth section and returns its report and paths.
pub fn run_breadth(
    b: &BreadthConfig,
    seed: u64,
) -> Result<(BreadthReport, DensityPath, DensityPath, DensityPath), crate::breadth::BreadthError> {
    let g = &b.generators;
    let n = g.dim();
    let states: Vec<CVector> = b
        .initial_states
        .iter()
        .map(|s| {
            let v = vector_from_json(s);
            ThreadBatchState::padded(v.as_slice(), n, b.phi0).map(|t| t.psi)
        })
        .collect::<Result<_, _>>()?;
    let rho0 = density_from_states(&states)?;
    let lead = evolve_thread(
        &ThreadBatchState {
            psi: states[0].clone(),
            phi: b.phi0,
        },
        g,
        b.dt,
        b.steps,
        seed,
        0,
    )?;
    let mut thread_paths = vec![lead.psi.clone()];
    for s in &states[1..] {
        thread_paths.push(evolve_thread_driven(s, g, b.dt, &lead.increments, &lead.phi)?);
    }
    let threads = DensityPath {
        times: lead.times.clone(),
        rho: (0..=b.steps)
            .map(|k| {
                let at: Vec<CVector> = thread_paths.iter().map(|p| p[k].clone()).collect();
                density_from_states(&at).map(|d| d.rho)
            })
            .collect::<Result<Vec<CMatrix>, _>>()?,
    };
    let stochastic = evolve_density_driven(&rho0, g, &lead.phi, b.dt, &lead.increments)?;
    let fixed = PhiSchedule::Fixed { phi: b.phi0 };
    let schedule = b.schedule.clone().unwrap_or_else(|| fixed.clone());
    let expected = evolve_density_expected(&rho0, g, &schedule, b.dt, b.steps)?;
    let mc = if b.mc_paths > 0 {
        let target = if schedule == fixed {
            expected.last().clone()
        } else {
            evolve_density_expected(&rho0, g, &fixed, b.dt, b.steps)?.last().clone()
        };
        let acc = mc_density_paths(&rho0, g, b.phi0, b.dt, b.steps, seed, 0, b.mc_paths)?;
        let distance = (acc.mean() - target).norm();
        let se = acc.standard_error();
        Some(McSummary {
            paths: b.mc_paths,
            distance,
            standard_error: se,
            k: MC_K,
            pass: distance < MC_K * se,
        })
    } else {
        None
    };
    let report = BreadthReport {
        n,
        m: g.len(),
        dt: b.dt,
        steps: b.steps,
        hermiticity_expected: expected.max_hermiticity_error(),
        hermiticity_stochastic: stochastic.max_hermiticity_error(),
        trace_drift_expected: expected.max_trace_drift(),
        trace_drift_stochastic: stochastic.max_trace_drift(),
        trace_drift_threads: threads.max_trace_drift(),
        thread_vs_density: (threads.last() - stochastic.last()).norm(),
        mc,
    };
    Ok((report, expected, stochastic, threads))
}

fn breadth_stage(st: &mut RunState<'_>) -> Result<(), HarnessError> {
    let Some(b) = &st.cfg.breadth else {
        return Err(HarnessError::Config("the breadth command needs a breadth section".into()));
    };
    let seed = b.seed.unwrap_or(st.cfg.run.seed);
    let (report, expected, stochastic, threads) =
        run_breadth(b, seed).map_err(|e| HarnessError::runtime("breadth", e))?;
    st.checks.push(CheckSummary {
        name: "breadth-hermiticity".into(),
        pass: report.hermiticity_expected < HERMITICITY_TOLERANCE
            && report.hermiticity_stochastic < HERMITICITY_TOLERANCE,
    });
    if let Some(mc) = &report.mc {
        st.checks.push(CheckSummary {
            name: "breadth-mc-mean".into(),
            pass: mc.pass,
        });
    }
    if st.wants(ExportFormat::Csv) {
        for (name, path) in [
            ("breadth-expected.csv", &expected),
            ("breadth-stochastic.csv", &stochastic),
            ("breadth-threads.csv", &threads),
        ] {
            st.out.write(name, |w| {
                w.write_all(density_path_csv(path).as_bytes())
                    .map_err(|e| e.to_string())
            })?;
        }
    }
    if st.wants(ExportFormat::Json) {
        st.out.json("breadth-report.json", &report)?;
    }
    Ok(())
}

/// Applies command-line overrides to a parsed configuration.
pub fn apply_overrides(cfg: &mut ExperimentConfig, opts: &RunOptions) {
    if let Some(seed) = opts.seed {
        cfg.run.seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        cfg.output.dir = dir.clone();
    }
}

/// Runs `command` for a validated configuration. Returns the manifest (also
/// written to `manifest.json`); a failed stage leaves a manifest marked
/// failed and returns the error.
pub fn run_config(
    cfg: &ExperimentConfig,
    command: Command,
    workers: usize,
) -> Result<RunManifest, HarnessError> {
    cfg.validate()?;
    match command {
        Command::Breadth if cfg.breadth.is_none() => {
            return Err(HarnessError::Config("the breadth command needs a breadth section".into()))
        }
        Command::Export if cfg.verify.is_none() => {
            return Err(HarnessError::Config(
                "the export command needs a verify section for the grid resolution".into(),
            ))
        }
        _ => {}
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::runtime("setup", e))?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| HarnessError::runtime("setup", e))?;
    let start = Instant::now();
    let mut st = RunState {
        cfg,
        out: Outputs {
            dir: dir.clone(),
            files: Vec::new(),
        },
        stages: Vec::new(),
        checks: Vec::new(),
    };
    let result = pool.install(|| -> Result<(), HarnessError> {
        match command {
            Command::Breadth => st.timed("breadth", breadth_stage),
            Command::Simulate | Command::Verify | Command::Export => {
                let keep = command != Command::Simulate;
                let sim = st.timed("simulate", |s| simulate_stage(s, keep))?;
                st.timed("estimate", |s| grid_stage(s, &sim, command == Command::Export))?;
                if command == Command::Verify {
                    st.timed("verify", |s| verify_stage(s, &sim))?;
                }
                Ok(())
            }
        }
    });
    let status = match &result {
        Err(_) => RunStatus::Failed,
        Ok(()) if st.checks.iter().all(|c| c.pass) => RunStatus::Ok,
        Ok(()) => RunStatus::VerificationFailed,
    };
    let manifest = RunManifest {
        status,
        error: result.as_ref().err().map(|e| e.to_string()),
        command,
        config_digest: cfg.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.run.seed,
        workers,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        stages: st.stages,
        files: st.out.files,
        checks: st.checks,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifests always serialize");
    fs::write(dir.join("manifest.json"), text + "\n").map_err(|e| HarnessError::runtime("manifest", e))?;
    result.map(|()| manifest)
}

/// Reads, overrides, validates and runs a configuration file.
pub fn run_experiment(
    config_path: &Path,
    command: Command,
    opts: &RunOptions,
) -> Result<RunManifest, HarnessError> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    apply_overrides(&mut cfg, opts);
    let workers = resolve_workers(opts.workers)?;
    run_config(&cfg, command, workers)
}
