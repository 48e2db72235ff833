// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

use approx::assert_relative_eq;
use cogflow_core::flow::reverse_measure_ratio;
use cogflow_core::{flow_forward, flow_reverse, CognitiveIndex, FlowError, ModelSpec, ThoughtPoint};
use proptest::prelude::*;

fn linear_2d(m: [[f64; 2]; 2], b: [f64; 2], boundary: &str) -> ModelSpec {
    let text = format!(
        r#"{{"dim": 2, "domain": {{"lo": [-20, -20], "hi": [20, 20]}}, "cognitive_size": 1,
            "velocity": {{"family": "linear", "matrices": [[[{:e}, {:e}], [{:e}, {:e}]]],
                          "offsets": [[{:e}, {:e}]]}},
            "kernel": {{"family": "uniform"}}, "lambda": 1.0,
            "initial": {{"kind": "uniform_box"}}, "boundary": "{boundary}"}}"#,
        m[0][0], m[0][1], m[1][0], m[1][1], b[0], b[1]
    );
    ModelSpec::from_json(&text, true).unwrap()
}

fn constant_1d(c: f64, boundary: &str) -> ModelSpec {
    let text = format!(
        r#"{{"dim": 1, "domain": {{"lo": [-1], "hi": [1]}}, "cognitive_size": 1,
            "velocity": {{"family": "constant", "vectors": [[{c:e}]]}},
            "kernel": {{"family": "uniform"}}, "lambda": 1.0,
            "initial": {{"kind": "uniform_box"}}, "boundary": "{boundary}"}}"#
    );
    ModelSpec::from_json(&text, true).unwrap()
}

const Y0: CognitiveIndex = CognitiveIndex(0);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_round_trip_is_tight(
        a in -0.5f64..0.5, b in -0.5f64..0.5, c in -0.5f64..0.5, d in -0.5f64..0.5,
        x in -1.0f64..1.0, y in -1.0f64..1.0, t in 0.01f64..2.0,
    ) {
        let spec = linear_2d([[a, b], [c, d]], [0.1, -0.1], "strict");
        let x0 = ThoughtPoint::new(&[x, y]);
        let fwd = flow_forward(&spec, x0, Y0, t, 1e-3).unwrap().endpoint();
        let back = flow_reverse(&spec, fwd, Y0, t, 1e-3).unwrap();
        prop_assert!(back.distance(&x0) < 1e-9);
    }

    #[test]
    fn linear_measure_ratio_matches_liouville(
        a in -0.5f64..0.5, b in -0.5f64..0.5, c in -0.5f64..0.5, d in -0.5f64..0.5,
        tau in 0.0f64..2.0,
    ) {
        // div v = tr M everywhere, so the reverse flow scales volumes by
        // exp(-tr(M) tau).
        let spec = linear_2d([[a, b], [c, d]], [0.0, 0.0], "strict");
        let r = reverse_measure_ratio(&spec, ThoughtPoint::new(&[0.3, -0.2]), Y0, tau, 1e-2, 1e-4)
            .unwrap();
        prop_assert!((r.ratio - (-(a + d) * tau).exp()).abs() < 1e-8);
    }

    #[test]
    fn constant_field_translates(c in -0.3f64..0.3, x in -0.5f64..0.5, t in 0.0f64..1.0) {
        let spec = constant_1d(c, "strict");
        let end = flow_forward(&spec, ThoughtPoint::new(&[x]), Y0, t, 0.01).unwrap().endpoint();
        prop_assert!((end.coords[0] - (x + c * t)).abs() < 1e-12);
    }
}

#[test]
fn exponential_growth_matches_closed_form() {
    let spec = linear_2d([[0.7, 0.0], [0.0, -1.3]], [0.0, 0.0], "strict");
    let traj = flow_forward(&spec, ThoughtPoint::new(&[1.0, 2.0]), Y0, 2.0, 1e-3).unwrap();
    let end = traj.endpoint();
    assert_relative_eq!(end.coords[0], 1.4f64.exp(), max_relative = 1e-10);
    assert_relative_eq!(end.coords[1], 2.0 * (-2.6f64).exp(), max_relative = 1e-10);
    assert_eq!(traj.times.first(), Some(&0.0));
    assert_relative_eq!(*traj.times.last().unwrap(), 2.0, epsilon = 1e-12);
}

#[test]
fn reversed_point_of_measure_ratio_is_the_reverse_flow() {
    let spec = linear_2d([[-0.2, 0.5], [-0.5, -0.2]], [0.3, 0.0], "strict");
    let x = ThoughtPoint::new(&[0.4, 0.1]);
    let r = reverse_measure_ratio(&spec, x, Y0, 1.5, 1e-3, 1e-4).unwrap();
    let direct = flow_reverse(&spec, x, Y0, 1.5, 1e-3).unwrap();
    assert!(r.reversed_point.distance(&direct) < 1e-12);
}

#[test]
fn strict_domain_reports_exit_and_clamp_stays_inside() {
    let strict = constant_1d(1.0, "strict");
    match flow_forward(&strict, ThoughtPoint::new(&[0.5]), Y0, 1.0, 0.01) {
        Err(FlowError::DomainExit { elapsed, .. }) => assert!(elapsed > 0.49 && elapsed < 0.52),
        other => panic!("expected a domain exit, got {other:?}"),
    }
    let clamp = constant_1d(1.0, "clamp");
    let end = flow_forward(&clamp, ThoughtPoint::new(&[0.5]), Y0, 1.0, 0.01).unwrap().endpoint();
    assert_eq!(end.coords[0], 1.0);
}

#[test]
fn zero_duration_is_identity_and_bad_step_is_rejected() {
    let spec = constant_1d(0.2, "strict");
    let x = ThoughtPoint::new(&[0.1]);
    assert_eq!(flow_forward(&spec, x, Y0, 0.0, 0.01).unwrap().endpoint(), x);
    assert!(matches!(flow_forward(&spec, x, Y0, 1.0, 0.0), Err(FlowError::BadStep { .. })));
    assert!(matches!(
        flow_forward(&spec, ThoughtPoint::new(&[3.0]), Y0, 1.0, 0.01),
        Err(FlowError::StartOutside(_))
    ));
}
