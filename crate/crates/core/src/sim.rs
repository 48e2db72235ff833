// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Monte Carlo ensembles of the coupled flow/renewal process.
//!
//! Continuous model: each particle flows under its current cognitive state
//! until its next renewal epoch, then draws a new state from `psi(x, .)`.
//! Epochs are simulated exactly (no thinning) because the renewal rate is
//! constant. Waiting time `k` of a particle is drawn from its time stream at
//! event `k`, and the target of renewal `k` from its space stream at event
//! `k`, so epochs never depend on targets and vice versa.
//!
//! Discrete model: explicit Euler step of length `dt`, and with probability
//! `lambda * dt` a fresh draw from `psi`.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::flow::{advance, Direction, FlowError};
use crate::model::{
    CognitiveIndex, InitialDensity, ModelSpec, ThoughtPoint, TimeOrigin, Vec3, MAX_DIM,
};
use crate::rng::{RngStreams, TICK_EVENT_BASE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("particle {particle}: {source}")]
    Flow {
        particle: usize,
        #[source]
        source: FlowError,
    },
    #[error(
        "lambda * dt = {0} must be below 1: the per-step jump probability lambda*dt is only a \
         valid Bernoulli approximation of the renewal clock when it is a probability"
    )]
    BernoulliInvalid(f64),
    #[error("ensemble must contain at least one particle")]
    EmptyEnsemble,
    #[error("the atom weight is only defined when the first jump happens at the time origin")]
    AtomUndefined,
    #[error("horizon and step must be positive (horizon {horizon}, step {step})")]
    BadHorizon { horizon: f64, step: f64 },
    #[error("snapshot was produced by a different model ({found}, expected {expected})")]
    ModelMismatch { expected: String, found: String },
}

/// Instantaneous record of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub x: ThoughtPoint,
    pub y: CognitiveIndex,
    /// Time elapsed since the last renewal.
    pub tau: f64,
    pub t: f64,
    /// Time of the last renewal (`t_start` if none happened yet).
    pub epoch: f64,
    /// Number of renewals after the initial draw.
    pub renewals: u64,
    /// Absolute time of the pending renewal (continuous model).
    pub next_renewal: f64,
    /// Number of discrete-model steps taken.
    pub ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub particle: usize,
    pub time: f64,
    pub from_y: CognitiveIndex,
    pub to_y: CognitiveIndex,
    pub x_at_jump: ThoughtPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSnapshot {
    pub t: f64,
    pub t_start: f64,
    pub particles: Vec<ParticleState>,
    pub seed: u64,
    pub model_hash: String,
    pub time_origin: TimeOrigin,
}

impl EnsembleSnapshot {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// True when the particle has not renewed since the time origin.
    pub fn is_atom(&self, p: &ParticleState) -> bool {
        p.tau == self.t - self.t_start
    }

    fn check_model(&self, spec: &ModelSpec) -> Result<(), SimError> {
        let expected = spec.model_hash();
        if expected == self.model_hash {
            Ok(())
        } else {
            Err(SimError::ModelMismatch {
                expected,
                found: self.model_hash.clone(),
            })
        }
    }
}

/// Inverse-CDF draw from the finite kernel vector `psi(x, .)`.
pub fn sample_transition<R: Rng + ?Sized>(
    spec: &ModelSpec,
    x: &ThoughtPoint,
    rng: &mut R,
) -> CognitiveIndex {
    let mut psi = vec![0.0; spec.cognitive_size];
    spec.kernel_into(&x.coords, &mut psi);
    let u: f64 = rng.random();
    let total: f64 = psi.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in psi.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if target < acc {
            return CognitiveIndex(i);
        }
    }
    CognitiveIndex(last_positive)
}

fn waiting_time<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    match Exp::new(lambda) {
        Ok(exp) => exp.sample(rng),
        Err(_) => f64::INFINITY,
    }
}

fn draw_initial<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ThoughtPoint {
    let d = spec.dim;
    let mut x = [0.0; MAX_DIM];
    match &spec.initial {
        InitialDensity::UniformBox { lo, hi } => {
            let lo = lo.as_ref().unwrap_or(&spec.domain.lo);
            let hi = hi.as_ref().unwrap_or(&spec.domain.hi);
            for i in 0..d {
                let u: f64 = rng.random();
                x[i] = lo[i] + u * (hi[i] - lo[i]);
            }
        }
        InitialDensity::Gaussian { mean, std } => loop {
            for i in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                x[i] = mean[i] + std[i] * z;
            }
            if spec.contains(&x) {
                break;
            }
        },
        InitialDensity::Point { x: p } => x[..d].copy_from_slice(p),
    }
    ThoughtPoint::from_array(x)
}

/// Draws `n` i.i.d. particles from the initial density. Each particle takes
/// its initial jump at `t = 0`: `y ~ psi(x, .)` and `tau = 0`.
pub fn sample_initial(spec: &ModelSpec, n: usize, seed: u64) -> Result<EnsembleSnapshot, SimError> {
    if n == 0 {
        return Err(SimError::EmptyEnsemble);
    }
    let particles = (0..n)
        .into_par_iter()
        .map(|i| {
            let streams = RngStreams::for_particle(seed, i as u64);
            let x = draw_initial(spec, &mut streams.initial.event(0));
            let y = sample_transition(spec, &x, &mut streams.space.event(0));
            let next = waiting_time(spec.lambda, &mut streams.time.event(0));
            ParticleState {
                x,
                y,
                tau: 0.0,
                t: 0.0,
                epoch: 0.0,
                renewals: 0,
                next_renewal: next,
                ticks: 0,
            }
        })
        .collect();
    Ok(EnsembleSnapshot {
        t: 0.0,
        t_start: 0.0,
        particles,
        seed,
        model_hash: spec.model_hash(),
        time_origin: spec.time_origin,
    })
}

fn flow_segment(
    spec: &ModelSpec,
    x: &Vec3,
    y: usize,
    duration: f64,
    step: f64,
    particle: usize,
) -> Result<Vec3, SimError> {
    if duration <= 0.0 {
        return Ok(*x);
    }
    advance(spec, x, y, duration, step, Direction::Forward)
        .map_err(|source| SimError::Flow { particle, source })
}

fn advance_particle(
    spec: &ModelSpec,
    seed: u64,
    index: usize,
    p: &mut ParticleState,
    t_end: f64,
    step: f64,
    mut log: Option<&mut Vec<JumpEvent>>,
) -> Result<(), SimError> {
    let streams = RngStreams::for_particle(seed, index as u64);
    while p.next_renewal <= t_end {
        let x = flow_segment(spec, &p.x.coords, p.y.0, p.next_renewal - p.t, step, index)?;
        p.x = ThoughtPoint::from_array(x);
        p.t = p.next_renewal;
        p.renewals += 1;
        let from = p.y;
        p.y = sample_transition(spec, &p.x, &mut streams.space.event(p.renewals));
        p.epoch = p.t;
        p.next_renewal = p.t + waiting_time(spec.lambda, &mut streams.time.event(p.renewals));
        if let Some(log) = log.as_deref_mut() {
            log.push(JumpEvent {
                particle: index,
                time: p.t,
                from_y: from,
                to_y: p.y,
                x_at_jump: p.x,
            });
        }
    }
    let x = flow_segment(spec, &p.x.coords, p.y.0, t_end - p.t, step, index)?;
    p.x = ThoughtPoint::from_array(x);
    p.t = t_end;
    p.tau = p.t - p.epoch;
    Ok(())
}

/// Advances a snapshot in place by `horizon`. When `log` is set the jump
/// events are returned in particle order, then time order.
pub fn advance_continuous(
    spec: &ModelSpec,
    snapshot: &mut EnsembleSnapshot,
    horizon: f64,
    step: f64,
    log: bool,
) -> Result<Vec<JumpEvent>, SimError> {
    if !(horizon > 0.0) {
        return Err(SimError::BadHorizon { horizon, step });
    }
    let t_end = snapshot.t + horizon;
    advance_continuous_to(spec, snapshot, t_end, step, log)
}

/// Advances a snapshot in place to the absolute time `t_end`. Use this when
/// stepping through a schedule so that times do not accumulate rounding.
pub fn advance_continuous_to(
    spec: &ModelSpec,
    snapshot: &mut EnsembleSnapshot,
    t_end: f64,
    step: f64,
    log: bool,
) -> Result<Vec<JumpEvent>, SimError> {
    if !(t_end > snapshot.t && step > 0.0 && t_end.is_finite()) {
        return Err(SimError::BadHorizon {
            horizon: t_end - snapshot.t,
            step,
        });
    }
    snapshot.check_model(spec)?;
    let seed = snapshot.seed;
    let events: Vec<Vec<JumpEvent>> = snapshot
        .particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let mut events = Vec::new();
            advance_particle(spec, seed, i, p, t_end, step, log.then_some(&mut events))?;
            Ok(events)
        })
        .collect::<Result<_, SimError>>()?;
    snapshot.t = t_end;
    Ok(events.into_iter().flatten().collect())
}

/// Simulates the continuous-time model for `horizon` time units from
/// `snapshot`, returning the new snapshot and the jump log.
pub fn simulate_continuous(
    spec: &ModelSpec,
    snapshot: &EnsembleSnapshot,
    horizon: f64,
    step: f64,
) -> Result<(EnsembleSnapshot, Vec<JumpEvent>), SimError> {
    let mut next = snapshot.clone();
    let log = advance_continuous(spec, &mut next, horizon, step, true)?;
    Ok((next, log))
}

/// One step of the discrete-time model.
pub fn step_discrete(
    spec: &ModelSpec,
    snapshot: &EnsembleSnapshot,
    dt: f64,
) -> Result<EnsembleSnapshot, SimError> {
    let mut next = snapshot.clone();
    step_discrete_in_place(spec, &mut next, dt)?;
    Ok(next)
}

/// In-place variant of [`step_discrete`]; returns the number of renewals
/// that happened during the step.
pub fn step_discrete_in_place(
    spec: &ModelSpec,
    snapshot: &mut EnsembleSnapshot,
    dt: f64,
) -> Result<u64, SimError> {
    let p_jump = spec.lambda * dt;
    if !(p_jump < 1.0) {
        return Err(SimError::BernoulliInvalid(p_jump));
    }
    if !(dt > 0.0) {
        return Err(SimError::BadHorizon {
            horizon: dt,
            step: dt,
        });
    }
    snapshot.check_model(spec)?;
    let t_new = snapshot.t + dt;
    let seed = snapshot.seed;
    let jumps: Vec<u64> = snapshot
        .particles
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let streams = RngStreams::for_particle(seed, i as u64);
            let u: f64 = streams.time.event(TICK_EVENT_BASE + p.ticks).random();
            let jumped = u < p_jump;
            let x_old = p.x;
            let v = spec.velocity_at(&x_old.coords, p.y.0);
            let mut x = x_old.coords;
            for k in 0..spec.dim {
                x[k] += v[k] * dt;
            }
            let x = spec.enforce_boundary(&x).ok_or_else(|| SimError::Flow {
                particle: i,
                source: FlowError::DomainExit {
                    elapsed: dt,
                    point: x[..spec.dim].to_vec(),
                },
            })?;
            if jumped {
                p.renewals += 1;
                p.y = sample_transition(spec, &x_old, &mut streams.space.event(p.renewals));
                p.epoch = t_new;
            }
            p.x = ThoughtPoint::from_array(x);
            p.t = t_new;
            p.tau = p.t - p.epoch;
            p.ticks += 1;
            Ok(u64::from(jumped))
        })
        .collect::<Result<_, SimError>>()?;
    snapshot.t = t_new;
    Ok(jumps.iter().sum())
}

/// Fraction of particles that have not renewed since the time origin, i.e.
/// the mass of the `tau = t - t_start` atom.
pub fn atom_weight(snapshot: &EnsembleSnapshot) -> Result<f64, SimError> {
    if snapshot.time_origin != TimeOrigin::JumpAtZero {
        return Err(SimError::AtomUndefined);
    }
    if snapshot.is_empty() {
        return Err(SimError::EmptyEnsemble);
    }
    let atoms = snapshot
        .particles
        .iter()
        .filter(|p| snapshot.is_atom(p))
        .count();
    Ok(atoms as f64 / snapshot.len() as f64)
}
