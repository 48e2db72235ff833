// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

use cogflow_core::sim::{advance_continuous_to, atom_weight, step_discrete_in_place};
use cogflow_core::{
    advance_continuous, sample_initial, simulate_continuous, EnsembleSnapshot, JumpEvent, ModelSpec,
    SimError,
};
use proptest::prelude::*;

fn telegraph(lambda: f64, speed: f64, p: f64) -> ModelSpec {
    let text = format!(
        r#"{{"dim": 1, "domain": {{"lo": [-5], "hi": [5]}}, "cognitive_size": 2,
            "velocity": {{"family": "constant", "vectors": [[{speed:e}], [{neg:e}]]}},
            "kernel": {{"family": "weights", "weights": [{p:e}, {q:e}]}},
            "lambda": {lambda:e}, "initial": {{"kind": "uniform_box", "lo": [-1], "hi": [1]}}}}"#,
        neg = -speed,
        q = 1.0 - p
    );
    ModelSpec::from_json(&text, true).unwrap()
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .unwrap()
        .install(f)
}

fn run(spec: &ModelSpec, n: usize, seed: u64) -> (EnsembleSnapshot, Vec<JumpEvent>) {
    let snap = sample_initial(spec, n, seed).unwrap();
    simulate_continuous(spec, &snap, 2.0, 0.01).unwrap()
}

#[test]
fn ensembles_do_not_depend_on_worker_count() {
    let spec = telegraph(1.5, 0.3, 0.4);
    let (a, log_a) = in_pool(1, || run(&spec, 20_000, 9));
    let (b, log_b) = in_pool(4, || run(&spec, 20_000, 9));
    assert_eq!(a.particles, b.particles);
    assert_eq!(log_a, log_b);
}

#[test]
fn different_seeds_give_different_ensembles() {
    let spec = telegraph(1.0, 0.3, 0.4);
    let (a, _) = run(&spec, 100, 1);
    let (b, _) = run(&spec, 100, 2);
    assert_ne!(a.particles, b.particles);
}

#[test]
fn stored_schedule_matches_single_run() {
    let spec = telegraph(2.0, 0.2, 0.5);
    let start = sample_initial(&spec, 5_000, 4).unwrap();
    let mut stepped = start.clone();
    let mut log = Vec::new();
    for k in 1..=40 {
        log.extend(advance_continuous_to(&spec, &mut stepped, k as f64 * 0.05, 0.01, true).unwrap());
    }
    let (direct, direct_log) = simulate_continuous(&spec, &start, 2.0, 0.01).unwrap();
    assert_eq!(stepped.t, 2.0);
    for (p, q) in stepped.particles.iter().zip(&direct.particles) {
        assert_eq!(p.y, q.y);
        assert_eq!(p.epoch, q.epoch);
        assert_eq!(p.renewals, q.renewals);
        assert!((p.x.coords[0] - q.x.coords[0]).abs() < 1e-12);
    }
    let key = |e: &JumpEvent| (e.particle, e.time.to_bits());
    let mut a: Vec<_> = log.iter().map(key).collect();
    let mut b: Vec<_> = direct_log.iter().map(key).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn elapsed_time_and_atoms_are_consistent() {
    let spec = telegraph(1.0, 0.3, 0.4);
    let (snap, log) = run(&spec, 20_000, 5);
    for (i, p) in snap.particles.iter().enumerate() {
        assert!(p.tau >= 0.0 && p.tau <= p.t + 1e-12);
        assert_eq!(snap.is_atom(p), p.renewals == 0, "particle {i}");
        assert_eq!(p.t, 2.0);
    }
    let logged: usize = log.len();
    let counted: u64 = snap.particles.iter().map(|p| p.renewals).sum();
    assert_eq!(logged as u64, counted);
    for e in &log {
        assert!(e.time > 0.0 && e.time <= 2.0);
    }
}

#[test]
fn jump_targets_follow_the_weights() {
    // Kernel weights do not depend on x, so after many renewals
    // P(y = 0) = 0.4 exactly.
    let spec = telegraph(3.0, 0.1, 0.4);
    let n = 100_000;
    let mut snap = sample_initial(&spec, n, 6).unwrap();
    advance_continuous(&spec, &mut snap, 3.0, 0.05, false).unwrap();
    let zeros = snap.particles.iter().filter(|p| p.y.0 == 0).count() as f64 / n as f64;
    let se = (0.4f64 * 0.6 / n as f64).sqrt();
    assert!((zeros - 0.4).abs() < 4.0 * se, "fraction {zeros}");
}

#[test]
fn transport_without_renewal_is_exact() {
    let spec = telegraph(1e-9, 0.25, 0.5);
    let start = sample_initial(&spec, 1_000, 8).unwrap();
    let (end, log) = simulate_continuous(&spec, &start, 2.0, 0.1).unwrap();
    assert!(log.is_empty());
    for (a, b) in start.particles.iter().zip(&end.particles) {
        let dir = if a.y.0 == 0 { 1.0 } else { -1.0 };
        assert!((b.x.coords[0] - (a.x.coords[0] + dir * 0.5)).abs() < 1e-12);
        assert_eq!(b.tau, 2.0);
    }
    assert_eq!(atom_weight(&end).unwrap(), 1.0);
}

#[test]
fn discrete_renewal_counts_are_binomial() {
    let spec = telegraph(2.0, 0.0, 0.5);
    let n = 50_000;
    let dt = 0.01;
    let mut snap = sample_initial(&spec, n, 10).unwrap();
    let mut total = 0u64;
    for _ in 0..100 {
        total += step_discrete_in_place(&spec, &mut snap, dt).unwrap();
    }
    // 100 Bernoulli(0.02) trials per particle.
    let mean = total as f64 / n as f64;
    let se = (100.0 * 0.02 * 0.98 / n as f64).sqrt();
    assert!((mean - 2.0).abs() < 4.0 * se, "mean {mean}");
    assert!((snap.t - 1.0).abs() < 1e-12);
    assert!(matches!(
        step_discrete_in_place(&spec, &mut snap, 0.5),
        Err(SimError::BernoulliInvalid(p)) if p >= 1.0
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_particle_stays_in_the_domain(seed in 0u64..1_000, lambda in 0.1f64..5.0) {
        let spec = telegraph(lambda, 0.3, 0.5);
        let (snap, _) = run(&spec, 500, seed);
        for p in &snap.particles {
            prop_assert!(spec.contains(&p.x.coords));
            prop_assert!(p.y.0 < 2);
        }
    }
}
