// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function returns a flat `Vec<f64>` (a `Float64Array` on the
//! JavaScript side) whose layout is documented on the function. The plain
//! Rust versions in [`demo`] carry the logic and are tested natively.

use wasm_bindgen::prelude::*;

pub mod demo {
    use cogflow_core::breadth::{
        density_from_states, evolve_density_expected, evolve_thread, CMatrix, CVector, C64,
        PhiSchedule, SwitchKernel, SwitchingGeneratorSet, ThreadBatchState,
    };
    use cogflow_core::sim::{advance_continuous_to, sample_initial};
    use cogflow_core::{ModelSpec, XMarginal};
    use nalgebra::DMatrix;

    /// Upper limits that keep a browser tab responsive.
    pub const MAX_PARTICLES: usize = 400_000;
    pub const MAX_BINS: usize = 400;
    pub const MAX_STEPS: usize = 20_000;
    pub const MAX_THREADS: usize = 12;

    fn telegraph(speed: f64, lambda: f64, p_right: f64) -> Result<ModelSpec, String> {
        let text = format!(
            r#"{{
                "dim": 1,
                "domain": {{"lo": [-4.0], "hi": [4.0]}},
                "cognitive_size": 2,
                "velocity": {{"family": "constant", "vectors": [[{speed:e}], [{neg:e}]]}},
                "kernel": {{"family": "weights", "weights": [{p_right:e}, {q:e}]}},
                "lambda": {lambda:e},
                "initial": {{"kind": "gaussian", "mean": [0.0], "std": [0.5]}},
                "boundary": "clamp"
            }}"#,
            neg = -speed,
            q = 1.0 - p_right,
        );
        ModelSpec::from_json(&text, true).map_err(|e| e.to_string())
    }

    fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), String> {
        if v.is_finite() && v >= lo && v <= hi {
            Ok(())
        } else {
            Err(format!("{name} must lie in [{lo}, {hi}], got {v}"))
        }
    }

    /// Thought marginal of the two-state telegraph model on `[-4, 4]`.
    ///
    /// Layout: `bins` bin centers, then `bins` density values, then the
    /// never-jumped fraction and `exp(-lambda t)`.
    pub fn telegraph_marginal(
        speed: f64,
        lambda: f64,
        p_right: f64,
        t: f64,
        particles: usize,
        bins: usize,
        seed: u64,
    ) -> Result<Vec<f64>, String> {
        check_range("speed", speed, 0.0, 2.0)?;
        check_range("lambda", lambda, 0.0, 20.0)?;
        check_range("p_right", p_right, 0.0, 1.0)?;
        check_range("t", t, 0.0, 10.0)?;
        if particles == 0 || particles > MAX_PARTICLES {
            return Err(format!("particles must lie in [1, {MAX_PARTICLES}]"));
        }
        if bins == 0 || bins > MAX_BINS {
            return Err(format!("bins must lie in [1, {MAX_BINS}]"));
        }
        let spec = telegraph(speed, lambda, p_right)?;
        let mut snap = sample_initial(&spec, particles, seed).map_err(|e| e.to_string())?;
        if t > 0.0 {
            advance_continuous_to(&spec, &mut snap, t, 0.01, false).map_err(|e| e.to_string())?;
        }
        let m = XMarginal::estimate(&spec, &snap, &[bins]).map_err(|e| e.to_string())?;
        let mut out: Vec<f64> = (0..bins).map(|c| m.x.center(c)[0]).collect();
        out.extend((0..bins).map(|c| m.density(c)));
        let atoms = snap.particles.iter().filter(|p| snap.is_atom(p)).count();
        out.push(atoms as f64 / particles as f64);
        out.push((-lambda * t).exp());
        Ok(out)
    }

    /// Tight-binding chain of `n` threads: generator 0 hops between
    /// neighbours, generator 1 adds a linear on-site potential, and the
    /// diffusion dephases by site index.
    pub fn chain_generators(
        n: usize,
        hop: f64,
        tilt: f64,
        dephasing: f64,
        switch_rate: f64,
    ) -> Result<SwitchingGeneratorSet, String> {
        let i = C64::new(0.0, 1.0);
        let mut h0 = CMatrix::zeros(n, n);
        for k in 0..n.saturating_sub(1) {
            h0[(k, k + 1)] = C64::new(hop, 0.0);
            h0[(k + 1, k)] = C64::new(hop, 0.0);
        }
        let mut h1 = h0.clone();
        for k in 0..n {
            h1[(k, k)] = C64::new(tilt * k as f64, 0.0);
        }
        let mut d = CMatrix::zeros(n, n);
        for k in 0..n {
            d[(k, k)] = i * (dephasing * k as f64 / n.max(1) as f64);
        }
        // Each switch moves to the other generator.
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        SwitchingGeneratorSet::new(
            vec![h0.map(|z| -i * z), h1.map(|z| -i * z)],
            switch_rate,
            SwitchKernel::Matrix(p),
            d,
        )
        .map_err(|e| e.to_string())
    }

    /// Site populations of a chain started on site 0.
    ///
    /// Layout: at most 401 rows (every step, thinned evenly past 400 steps,
    /// always ending at the last one) of `1 + 2n + 1` values:
    /// time, `n` expected populations (generator 0 throughout), `n`
    /// populations of one stochastic thread path, and that path's active
    /// generator index.
    #[allow(clippy::too_many_arguments)]
    pub fn chain_populations(
        n: usize,
        hop: f64,
        tilt: f64,
        dephasing: f64,
        switch_rate: f64,
        dt: f64,
        steps: usize,
        seed: u64,
    ) -> Result<Vec<f64>, String> {
        if !(2..=MAX_THREADS).contains(&n) {
            return Err(format!("threads must lie in [2, {MAX_THREADS}]"));
        }
        if steps == 0 || steps > MAX_STEPS {
            return Err(format!("steps must lie in [1, {MAX_STEPS}]"));
        }
        check_range("dt", dt, 1e-5, 0.1)?;
        check_range("hop", hop, 0.0, 10.0)?;
        check_range("tilt", tilt, -10.0, 10.0)?;
        check_range("dephasing", dephasing, 0.0, 5.0)?;
        check_range("switch_rate", switch_rate, 0.0, 0.99 / dt)?;
        let gens = chain_generators(n, hop, tilt, dephasing, switch_rate)?;
        let mut psi0 = CVector::zeros(n);
        psi0[0] = C64::new(1.0, 0.0);
        let rho0 = density_from_states(std::slice::from_ref(&psi0)).map_err(|e| e.to_string())?;
        let expected =
            evolve_density_expected(&rho0, &gens, &PhiSchedule::Fixed { phi: 0 }, dt, steps)
                .map_err(|e| e.to_string())?;
        let path = evolve_thread(&ThreadBatchState { psi: psi0, phi: 0 }, &gens, dt, steps, seed, 0)
            .map_err(|e| e.to_string())?;
        let stride = steps.div_ceil(400);
        let mut out = Vec::new();
        for k in (0..=steps).filter(|k| k % stride == 0 || *k == steps) {
            out.push(k as f64 * dt);
            out.extend((0..n).map(|j| expected.rho[k][(j, j)].re));
            let psi = &path.psi[k];
            let norm = psi.norm_squared().max(f64::MIN_POSITIVE);
            out.extend(psi.iter().map(|z| z.norm_sqr() / norm));
            out.push(path.phi[k] as f64);
        }
        Ok(out)
    }
}

/// See [`demo::telegraph_marginal`].
#[wasm_bindgen]
pub fn telegraph_marginal(
    speed: f64,
    lambda: f64,
    p_right: f64,
    t: f64,
    particles: u32,
    bins: u32,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    demo::telegraph_marginal(
        speed,
        lambda,
        p_right,
        t,
        particles as usize,
        bins as usize,
        seed as u64,
    )
    .map_err(|e| JsError::new(&e))
}

/// See [`demo::chain_populations`].
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn chain_populations(
    n: u32,
    hop: f64,
    tilt: f64,
    dephasing: f64,
    switch_rate: f64,
    dt: f64,
    steps: u32,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    demo::chain_populations(
        n as usize,
        hop,
        tilt,
        dephasing,
        switch_rate,
        dt,
        steps as usize,
        seed as u64,
    )
    .map_err(|e| JsError::new(&e))
}
