// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Simulation and verification toolkit for cognitive flows.
//!
//! A thought `x` moves along a velocity field selected by a discrete
//! cognitive state `y`; at the epochs of a Poisson clock the state is
//! redrawn from a position-dependent kernel. The crate simulates ensembles
//! of such processes, estimates their joint densities on grids, checks the
//! estimates against the evolution equations they should satisfy, and
//! integrates the breadth (thread-switching) dynamics on density matrices.
//!
//! Module map:
//!
//! * [`model`]: model description, JSON parsing, validation.
//! * [`flow`]: deterministic flow maps and reverse-flow Jacobians.
//! * [`sim`]: exact renewal simulation and the discrete-step variant.
//! * [`density`]: histogram density estimators.
//! * [`verify`]: residual checks and the renewal right-hand side.
//! * [`breadth`]: thread and density-matrix evolution with switching.
//! * [`export`] and [`harness`]: file formats and the config-driven runner.

// Parameter checks use `!(x > 0.0)` so that NaN is rejected along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod breadth;
pub mod density;
pub mod export;
pub mod flow;
pub mod harness;
pub mod model;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod verify;

pub use density::{estimate_density, DensityGrid, DensityHistory, GridConfig, XGrid, XMarginal};
pub use flow::{flow_forward, flow_reverse, FlowError, Trajectory};
pub use harness::{run_experiment, Command, ExperimentConfig, HarnessError, RunManifest, RunStatus};
pub use model::{
    eval_kernel, eval_velocity, validate_model, CognitiveIndex, ModelError, ModelSpec, ThoughtPoint,
    TimeOrigin,
};
pub use sim::{
    advance_continuous, sample_initial, simulate_continuous, step_discrete, EnsembleSnapshot,
    JumpEvent, ParticleState, SimError,
};
pub use verify::{continuity_residual, kernel_equation_check, kernel_rhs, ResidualReport, TheoremId};
