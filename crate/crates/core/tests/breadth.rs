// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

use cogflow_core::breadth::{
    density_from_states, evolve_density_driven, evolve_density_stochastic, evolve_thread,
    evolve_thread_driven, mc_density_paths, BreadthError, CMatrix, CVector, PhiSchedule,
    SwitchKernel, SwitchingGeneratorSet, ThreadBatchState, C64,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn anti_hermitian(entries: &[(f64, f64)], n: usize, scale: f64) -> CMatrix {
    let x = CMatrix::from_fn(n, n, |i, j| {
        let (re, im) = entries[(i * n + j) % entries.len()];
        C64::new(re, im)
    });
    (&x - x.adjoint()) * C64::new(0.5 * scale, 0.0)
}

fn pair_set(n: usize, d_scale: f64, rate: f64) -> SwitchingGeneratorSet {
    let e1: Vec<(f64, f64)> = (0..n * n).map(|k| ((k as f64 * 0.37).sin(), (k as f64 * 0.91).cos())).collect();
    let e2: Vec<(f64, f64)> = (0..n * n).map(|k| ((k as f64 * 1.3).cos(), (k as f64 * 0.23).sin())).collect();
    let ed: Vec<(f64, f64)> = (0..n * n).map(|k| ((k as f64 * 0.71).cos(), (k as f64 * 0.53).sin())).collect();
    SwitchingGeneratorSet::new(
        vec![anti_hermitian(&e1, n, 1.0), anti_hermitian(&e2, n, 1.0)],
        rate,
        SwitchKernel::Matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])),
        anti_hermitian(&ed, n, d_scale),
    )
    .unwrap()
}

fn basis_state(n: usize, k: usize, amp: C64) -> CVector {
    let mut v = CVector::zeros(n);
    v[k] = amp;
    v
}

#[test]
fn diffusion_must_be_anti_hermitian_and_kernels_stochastic() {
    let n = 3;
    let mut h = CMatrix::identity(n, n);
    h[(0, 1)] = C64::new(1.0, 0.0);
    let ok = pair_set(n, 0.1, 1.0);
    let bad = SwitchingGeneratorSet::new(
        ok.generators.clone(),
        1.0,
        ok.switch_kernel.clone(),
        h,
    );
    assert!(matches!(bad, Err(BreadthError::NotAntiHermitian(_))));
    let bad_rows = SwitchingGeneratorSet::new(
        ok.generators.clone(),
        1.0,
        SwitchKernel::Matrix(DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.0, 1.0])),
        ok.diffusion.clone(),
    );
    assert!(matches!(bad_rows, Err(BreadthError::KernelRow { .. })));
}

#[test]
fn switching_step_must_be_small() {
    let g = pair_set(2, 0.1, 50.0);
    let s = ThreadBatchState::padded(&[C64::new(1.0, 0.0)], 2, 0).unwrap();
    assert!(matches!(
        evolve_thread(&s, &g, 0.05, 10, 1, 0),
        Err(BreadthError::SwitchStepTooLarge(_))
    ));
}

#[test]
fn thread_and_density_paths_agree_for_small_noise() {
    // Both are Euler-Maruyama discretizations of the same equation; with a
    // small diffusion their difference is dominated by O(dt) terms.
    let n = 4;
    let g = pair_set(n, 0.2, 2.0);
    let dt = 1e-3;
    let s0 = basis_state(n, 0, C64::new(0.8f64.sqrt(), 0.0));
    let s1 = basis_state(n, 2, C64::new(0.0, 0.2f64.sqrt()));
    let lead = evolve_thread(&ThreadBatchState { psi: s0.clone(), phi: 0 }, &g, dt, 1000, 3, 0).unwrap();
    let other = evolve_thread_driven(&s1, &g, dt, &lead.increments, &lead.phi).unwrap();
    let rho0 = density_from_states(&[s0, s1]).unwrap();
    let em = evolve_density_driven(&rho0, &g, &lead.phi, dt, &lead.increments).unwrap();
    let built = density_from_states(&[lead.psi[1000].clone(), other[1000].clone()]).unwrap();
    let diff = (&built.rho - em.last()).norm();
    assert!(diff < 10.0 * dt, "difference {diff}");
    assert!(lead.phi.contains(&1), "the path never switched");
}

#[test]
fn stochastic_density_path_reuses_thread_noise() {
    let n = 3;
    let g = pair_set(n, 0.3, 1.0);
    let psi = basis_state(n, 1, C64::new(1.0, 0.0));
    let lead = evolve_thread(&ThreadBatchState { psi: psi.clone(), phi: 0 }, &g, 1e-3, 200, 11, 5).unwrap();
    let rho0 = density_from_states(&[psi]).unwrap();
    let a = evolve_density_stochastic(&rho0, &g, &lead.phi, 1e-3, 200, 11, 5).unwrap();
    let b = evolve_density_driven(&rho0, &g, &lead.phi, 1e-3, &lead.increments).unwrap();
    assert_eq!(a, b);
    assert!(a.max_hermiticity_error() < 1e-12);
    assert!(a.max_trace_drift() < 1e-12);
}

#[test]
fn switch_counts_match_the_rate() {
    let g = pair_set(2, 0.0, 2.0);
    let dt = 1e-2;
    let steps = 100;
    let paths = 2_000;
    let mut total = 0usize;
    for path in 0..paths {
        let s = ThreadBatchState::padded(&[C64::new(1.0, 0.0)], 2, 0).unwrap();
        let tp = evolve_thread(&s, &g, dt, steps, 21, path).unwrap();
        total += tp.phi.windows(2).filter(|w| w[0] != w[1]).count();
    }
    // Bernoulli(rate dt) per step; every event switches with this kernel.
    let p = 2.0 * dt;
    let mean = total as f64 / paths as f64;
    let se = (steps as f64 * p * (1.0 - p) / paths as f64).sqrt();
    assert!((mean - steps as f64 * p).abs() < 4.0 * se, "mean {mean}");
}

#[test]
fn monte_carlo_mean_is_worker_invariant() {
    let g = pair_set(3, 0.5, 1.0);
    let rho0 = density_from_states(&[basis_state(3, 0, C64::new(1.0, 0.0))]).unwrap();
    let run = |w: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .unwrap()
            .install(|| mc_density_paths(&rho0, &g, 0, 1e-3, 100, 8, 0, 700).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    assert_eq!(a.count, 700);
}

#[test]
fn piecewise_schedule_validates_indices() {
    let g = pair_set(2, 0.1, 1.0);
    let bad = PhiSchedule::Piecewise {
        segments: vec![(0.0, 0), (0.5, 7)],
    };
    let rho0 = density_from_states(&[basis_state(2, 0, C64::new(1.0, 0.0))]).unwrap();
    assert!(cogflow_core::breadth::evolve_density_expected(&rho0, &g, &bad, 1e-3, 10).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_json_round_trips(
        entries in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 9),
        rate in 0.0f64..5.0,
        p in 0.0f64..1.0,
    ) {
        let a = anti_hermitian(&entries, 3, 1.0);
        let d = anti_hermitian(&entries[3..], 3, 0.4);
        let g = SwitchingGeneratorSet::new(
            vec![a.clone(), -a],
            rate,
            SwitchKernel::Matrix(DMatrix::from_row_slice(2, 2, &[p, 1.0 - p, 1.0 - p, p])),
            d,
        ).unwrap();
        let back = SwitchingGeneratorSet::from_json(&g.to_json()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn density_matrices_from_states_are_hermitian_psd(
        entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8),
    ) {
        let s: Vec<CVector> = entries
            .chunks(4)
            .map(|c| CVector::from_iterator(4, c.iter().map(|&(r, i)| C64::new(r, i))))
            .collect();
        let rho = density_from_states(&s).unwrap();
        prop_assert!(rho.hermiticity_error() < 1e-15);
        prop_assert!(rho.eigenvalues().iter().all(|&l| l > -1e-12));
        let norms: f64 = s.iter().map(|v| v.norm_squared()).sum();
        prop_assert!((rho.trace().re - norms).abs() < 1e-12);
    }
}
