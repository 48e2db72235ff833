// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;

use cogflow_core::harness::{
    exit_code, run_config, run_experiment, Command, ExperimentConfig, HarnessError, RunOptions,
    RunStatus,
};
use sha2::{Digest, Sha256};

fn small_config(dir: &Path, extra_verify: &str) -> String {
    format!(
        r#"{{
        "model": {{
            "dim": 1,
            "domain": {{"lo": [-3.0], "hi": [3.0]}},
            "cognitive_size": 2,
            "velocity": {{"family": "constant", "vectors": [[0.3], [-0.3]]}},
            "kernel": {{"family": "weights", "weights": [0.4, 0.6]}},
            "lambda": 1.0,
            "initial": {{"kind": "gaussian", "mean": [0.0], "std": [0.5]}}
        }},
        "run": {{"particles": 20000, "horizon": 1.0, "step": 0.01, "store_every": 0.05, "seed": 5}},
        "verify": {{"x_bins": [40], "tau_bins": 10 {extra_verify}}},
        "output": {{"dir": {dir:?}, "dump_jumps": true}}
    }}"#
    )
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_rate_is_a_config_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let text = small_config(&out, "").replace("\"lambda\": 1.0,", "");
    let path = write_config(tmp.path(), &text);
    let r = run_experiment(&path, Command::Verify, &RunOptions::default());
    assert!(matches!(r, Err(HarnessError::Config(_))));
    assert_eq!(exit_code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn invalid_numbers_are_all_reported_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let text = small_config(&out, ", \"k_noise\": -1.0")
        .replace("\"particles\": 20000", "\"particles\": 0")
        .replace("\"x_bins\": [40]", "\"x_bins\": [40, 3]");
    let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
    for needle in ["particles", "k_noise", "x_bins"] {
        assert!(err.contains(needle), "{err}");
    }
    assert!(!out.exists());
}

#[test]
fn verify_run_writes_artifacts_with_matching_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let path = write_config(tmp.path(), &small_config(&out, ""));
    let opts = RunOptions {
        workers: Some(2),
        ..RunOptions::default()
    };
    let m = run_experiment(&path, Command::Verify, &opts).unwrap();
    assert_eq!(m.status, RunStatus::Ok, "{:?}", m.checks);
    assert_eq!(exit_code(&Ok(m.clone())), 0);
    let names: Vec<&str> = m.files.iter().map(|f| f.name.as_str()).collect();
    for expected in [
        "snapshot.csv",
        "jumps.csv",
        "grid.csv",
        "report-kernel-jump-at-zero.json",
        "report-continuity-jump-at-zero.json",
    ] {
        assert!(names.contains(&expected), "{names:?}");
    }
    for f in &m.files {
        let bytes = fs::read(out.join(&f.name)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256, "{}", f.name);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
    assert!(manifest["stages"].as_array().unwrap().len() >= 3);
}

#[test]
fn reruns_and_worker_counts_reproduce_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&small_config(&tmp.path().join("unused"), "")).unwrap();
    let mut digests = Vec::new();
    for (k, workers) in [1, 3, 3].into_iter().enumerate() {
        let mut c = cfg.clone();
        c.output.dir = tmp.path().join(format!("run{k}"));
        let m = run_config(&c, Command::Export, workers).unwrap();
        digests.push(m.files.iter().map(|f| (f.name.clone(), f.sha256.clone())).collect::<Vec<_>>());
        assert_eq!(m.config_digest, c.digest());
    }
    assert!(digests[0].iter().any(|(n, _)| n == "history.csv"));
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[1], digests[2]);
}

#[test]
fn seed_override_changes_outputs_and_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &small_config(&tmp.path().join("a"), ""));
    let a = run_experiment(&path, Command::Simulate, &RunOptions::default()).unwrap();
    let b = run_experiment(
        &path,
        Command::Simulate,
        &RunOptions {
            seed: Some(6),
            out_dir: Some(tmp.path().join("b")),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_ne!(a.config_digest, b.config_digest);
    assert_ne!(a.files[0].sha256, b.files[0].sha256);
    assert_eq!(b.seed, 6);
}

#[test]
fn failing_stage_leaves_a_failed_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    // Particles run into the strict boundary well before the horizon.
    let text = small_config(&out, "")
        .replace("[[0.3], [-0.3]]", "[[3.0], [-3.0]]")
        .replace("\"horizon\": 1.0", "\"horizon\": 3.0");
    let path = write_config(tmp.path(), &text);
    let r = run_experiment(&path, Command::Simulate, &RunOptions::default());
    assert!(matches!(r, Err(HarnessError::Runtime { .. })));
    assert_eq!(exit_code(&r), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(manifest["error"].as_str().unwrap().contains("simulate"));
}

#[test]
fn failed_check_maps_to_exit_code_one() {
    // The jump-at-zero and stationary forms differ by e^{-1} at lambda t = 1.
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let text = small_config(&out, ", \"checks\": [\"forms\"]");
    let path = write_config(tmp.path(), &text);
    let m = run_experiment(&path, Command::Verify, &RunOptions::default()).unwrap();
    assert_eq!(m.status, RunStatus::VerificationFailed);
    assert_eq!(m.exit_code(), 1);
    let forms: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("forms.json")).unwrap()).unwrap();
    assert!(forms["l1_difference"].as_f64().unwrap() > 0.1);
}

#[test]
fn bundled_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn breadth_command_requires_its_section() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&small_config(&tmp.path().join("out"), "")).unwrap();
    let r = run_config(&cfg, Command::Breadth, 1);
    assert!(matches!(r, Err(HarnessError::Config(_))));
    assert!(!tmp.path().join("out").exists());
}
