// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Fixed-step RK4 integration of `dx/dt = v(x, y)` under a frozen cognitive
//! state, its time reversal `dw/du = -v(w, y)`, and the volume ratio of the
//! reversed flow obtained from the Liouville formula
//! `d log J / du = -div v(w(u), y)`.

use thiserror::Error;

use crate::model::{CognitiveIndex, ModelSpec, ThoughtPoint, Vec3, MAX_DIM};

/// Default spacing for central-difference divergences.
pub const DEFAULT_H_DIV: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step must be positive and duration non-negative (step {step}, duration {duration})")]
    BadStep { step: f64, duration: f64 },
    #[error("trajectory left the domain at elapsed time {elapsed} near {point:?}")]
    DomainExit { elapsed: f64, point: Vec<f64> },
    #[error("starting point {0:?} is outside the domain")]
    StartOutside(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<ThoughtPoint>,
    pub cognitive: CognitiveIndex,
}

impl Trajectory {
    pub fn endpoint(&self) -> ThoughtPoint {
        *self.points.last().expect("trajectory has at least one point")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseMeasureRatio {
    pub ratio: f64,
    pub tau: f64,
    pub base_point: ThoughtPoint,
    /// `x*(tau; base_point, cognitive)`.
    pub reversed_point: ThoughtPoint,
    pub cognitive: CognitiveIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

fn axpy(x: &Vec3, a: f64, k: &Vec3) -> Vec3 {
    let mut out = *x;
    for i in 0..MAX_DIM {
        out[i] += a * k[i];
    }
    out
}

fn rk4_step(spec: &ModelSpec, x: &Vec3, y: usize, h: f64, sign: f64) -> Vec3 {
    let f = |p: &Vec3| {
        let mut v = spec.velocity_at(p, y);
        for c in &mut v {
            *c *= sign;
        }
        v
    };
    let k1 = f(x);
    let k2 = f(&axpy(x, 0.5 * h, &k1));
    let k3 = f(&axpy(x, 0.5 * h, &k2));
    let k4 = f(&axpy(x, h, &k3));
    let mut out = *x;
    for i in 0..MAX_DIM {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Step lengths covering `duration` exactly: full steps followed by one
/// shortened step when `duration` is not a multiple of `step`.
fn step_plan(duration: f64, step: f64) -> (usize, f64) {
    let full = (duration / step).floor();
    let rest = duration - full * step;
    if rest > 1e-12 * duration.max(step) {
        (full as usize, rest)
    } else {
        (full as usize, 0.0)
    }
}

fn check_args(duration: f64, step: f64) -> Result<(), FlowError> {
    if step > 0.0 && step.is_finite() && duration >= 0.0 && duration.is_finite() {
        Ok(())
    } else {
        Err(FlowError::BadStep { step, duration })
    }
}

/// Integrates without storing intermediate points. The boundary policy of
/// the model is applied after every step.
pub(crate) fn advance(
    spec: &ModelSpec,
    x: &Vec3,
    y: usize,
    duration: f64,
    step: f64,
    direction: Direction,
) -> Result<Vec3, FlowError> {
    check_args(duration, step)?;
    let (full, rest) = step_plan(duration, step);
    let sign = direction.sign();
    let mut p = *x;
    let mut elapsed = 0.0;
    let steps = std::iter::repeat_n(step, full).chain((rest > 0.0).then_some(rest));
    for h in steps {
        p = rk4_step(spec, &p, y, h, sign);
        elapsed += h;
        p = spec.enforce_boundary(&p).ok_or_else(|| FlowError::DomainExit {
            elapsed,
            point: p[..spec.dim].to_vec(),
        })?;
    }
    Ok(p)
}

fn start_point(spec: &ModelSpec, x: &ThoughtPoint) -> Result<Vec3, FlowError> {
    spec.enforce_boundary(&x.coords)
        .ok_or_else(|| FlowError::StartOutside(x.coords[..spec.dim].to_vec()))
}

/// Forward trajectory of `dx/dt = v(x, y)` from `t = 0` to `duration`.
///
/// Classical RK4 with fixed `step`; the final step is shortened so the last
/// time equals `duration` exactly.
pub fn flow_forward(
    spec: &ModelSpec,
    x0: ThoughtPoint,
    y: CognitiveIndex,
    duration: f64,
    step: f64,
) -> Result<Trajectory, FlowError> {
    check_args(duration, step)?;
    let mut p = start_point(spec, &x0)?;
    let (full, rest) = step_plan(duration, step);
    let mut times = Vec::with_capacity(full + 2);
    let mut points = Vec::with_capacity(full + 2);
    times.push(0.0);
    points.push(ThoughtPoint::from_array(p));
    for k in 0..full + usize::from(rest > 0.0) {
        let h = if k < full { step } else { rest };
        p = rk4_step(spec, &p, y.0, h, 1.0);
        let t = if k + 1 == full && rest == 0.0 || k == full {
            duration
        } else {
            (k + 1) as f64 * step
        };
        p = spec.enforce_boundary(&p).ok_or_else(|| FlowError::DomainExit {
            elapsed: t,
            point: p[..spec.dim].to_vec(),
        })?;
        times.push(t);
        points.push(ThoughtPoint::from_array(p));
    }
    Ok(Trajectory {
        times,
        points,
        cognitive: y,
    })
}

/// Time reversal `x*(s; x, y)`: the point `s` time units before `x` on the
/// trajectory through `x`.
pub fn flow_reverse(
    spec: &ModelSpec,
    x: ThoughtPoint,
    y: CognitiveIndex,
    s: f64,
    step: f64,
) -> Result<ThoughtPoint, FlowError> {
    let p = start_point(spec, &x)?;
    advance(spec, &p, y.0, s, step, Direction::Backward).map(ThoughtPoint::from_array)
}

/// Limit of `|x*(tau; B(x, eps), y)| / |B(x, eps)|` as `eps -> 0`.
///
/// Integrates the reverse trajectory together with `log J`, where
/// `d log J / du = -div v(w(u), y)` and the divergence is taken by central
/// differences with spacing `h_div`.
pub fn reverse_measure_ratio(
    spec: &ModelSpec,
    x: ThoughtPoint,
    y: CognitiveIndex,
    tau: f64,
    step: f64,
    h_div: f64,
) -> Result<ReverseMeasureRatio, FlowError> {
    check_args(tau, step)?;
    let mut p = start_point(spec, &x)?;
    let (full, rest) = step_plan(tau, step);
    let yi = y.0;
    // Augmented right-hand side: (-v(w), -div v(w)).
    let rhs = |w: &Vec3| -> (Vec3, f64) {
        let mut v = spec.velocity_at(w, yi);
        for c in &mut v {
            *c = -*c;
        }
        (v, -spec.divergence(w, yi, h_div))
    };
    let mut log_j = 0.0;
    let mut elapsed = 0.0;
    let steps = std::iter::repeat_n(step, full).chain((rest > 0.0).then_some(rest));
    for h in steps {
        let (k1, l1) = rhs(&p);
        let (k2, l2) = rhs(&axpy(&p, 0.5 * h, &k1));
        let (k3, l3) = rhs(&axpy(&p, 0.5 * h, &k2));
        let (k4, l4) = rhs(&axpy(&p, h, &k3));
        for i in 0..MAX_DIM {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        log_j += h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
        elapsed += h;
        p = spec.enforce_boundary(&p).ok_or_else(|| FlowError::DomainExit {
            elapsed,
            point: p[..spec.dim].to_vec(),
        })?;
    }
    Ok(ReverseMeasureRatio {
        ratio: log_j.exp(),
        tau,
        base_point: x,
        reversed_point: ThoughtPoint::from_array(p),
        cognitive: y,
    })
}
