//! Behavioral tests driving the installed binary end to end on a
//! miniature experiment. Artifact contracts (headers, manifests, exit
//! codes) are asserted here; the acceptance suite covers the numerical
//! criteria.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dedtwin"))
}

fn run_ok(config: &Path, args: &[&str]) -> String {
    let out = bin()
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "dedtwin {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Small enough to finish the whole pipeline in seconds.
fn tiny_config(out_dir: &Path, seed: u64) -> Value {
    json!({
        "out_dir": out_dir.display().to_string(),
        "seed": seed,
        "mc_samples": 3,
        "profiles": {"count": 3, "duration_s": 18.0, "sample_period_s": 0.02},
        "build": {"wall_length_mm": 21.0, "n_layers": 6},
        "sim": {"record_nodes": [[5, 2], [5, 5]]},
        "surrogate": {
            "window": 40, "stride": 20, "horizon": 10,
            "hidden": 4, "attention_dim": 3, "invariant_width": 3,
            "epochs": 2, "batch_size": 8
        },
        "bo": {"n_init": 3, "n_iter": 2, "acq_budget": 64}
    })
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out, 7));

    run_ok(&cfg, &["gen-profiles"]);
    assert!(out.join("profiles/profile_000.csv").exists());
    assert!(out.join("profiles/library.json").exists());
    assert!(out.join("profiles/manifest.json").exists());

    run_ok(&cfg, &["simulate"]);
    let metas: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sim/histories.json")).unwrap())
            .unwrap();
    assert_eq!(metas.as_array().unwrap().len(), 6); // 3 profiles x 2 nodes

    let stdout = run_ok(&cfg, &["make-dataset"]);
    assert!(stdout.contains("2:1"), "split line: {stdout}");

    let stdout = run_ok(&cfg, &["train"]);
    assert!(stdout.contains("R^2"), "train line: {stdout}");
    assert!(out.join("model/checkpoint.json").exists());
    let metrics = std::fs::read_to_string(out.join("model/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,loss,log_lik,kl\n"));
    assert_eq!(metrics.lines().count(), 1 + 2); // header + one row per epoch

    run_ok(&cfg, &["predict"]);
    let dir = out.join("predictions/series");
    let pred = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("pred_"))
        .expect("a prediction CSV");
    let text = std::fs::read_to_string(pred.path()).unwrap();
    assert!(text.starts_with("time_s,mean_c,lower95_c,upper95_c,truth_c\n"));
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').count(), 5);
    }

    run_ok(&cfg, &["predict", "--mode", "rollout"]);
    assert!(out.join("predictions/rollout/manifest.json").exists());
    // A second predict run must not clobber the first mode's manifest.
    assert!(out.join("predictions/series/manifest.json").exists());

    run_ok(&cfg, &["optimize"]);
    let log = std::fs::read_to_string(out.join("bo/bo_log.csv")).unwrap();
    assert!(log.starts_with("iteration,kappa,rho,candidate_json,objective_s,best_so_far_s\n"));
    assert_eq!(log.lines().count(), 1 + 5); // header + n_init + n_iter
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bo/bo_report.json")).unwrap())
            .unwrap();
    assert!(report["best_objective_s"].as_f64().unwrap() > 0.0);

    let stdout = run_ok(&cfg, &["report"]);
    assert!(stdout.contains("bo"));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("stage,file,bytes,sha256\n"));
    // Every stage directory shows up in the bundle.
    for stage in ["profiles", "sim", "dataset", "model", "predictions/series", "bo"] {
        assert!(
            csv.lines().any(|l| l.starts_with(&format!("{stage},"))),
            "stage {stage} missing from report.csv"
        );
    }
}

#[test]
fn manifests_carry_seed_and_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny_config(&out, 33));
    run_ok(&cfg, &["gen-profiles"]);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("profiles/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["tool"], "dedtwin");
    assert_eq!(manifest["seed"], 33);
    assert_eq!(manifest["command"], "gen-profiles");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["created_unix_s"].as_u64().unwrap() > 1_700_000_000);
    let files = manifest["files"].as_array().unwrap();
    // 3 profile CSVs + library.json, manifest not self-listed.
    assert_eq!(files.len(), 4);
    for f in files {
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg = write_config(tmp.path(), &tiny_config(&out_a, 1));

    run_ok(&cfg, &["gen-profiles"]);
    let base = std::fs::read_to_string(out_a.join("profiles/profile_000.csv")).unwrap();

    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "2", "--out"])
        .arg(&out_b)
        .arg("gen-profiles")
        .output()
        .unwrap();
    assert!(out.status.success());
    let reseeded = std::fs::read_to_string(out_b.join("profiles/profile_000.csv")).unwrap();
    assert_ne!(base, reseeded, "a different seed must change the library");

    let manifest: Value = serde_json::from_str(
        &std::fs::read_to_string(out_b.join("profiles/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 2, "the override is what gets recorded");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown key.
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"sede": 1}"#).unwrap();
    let out = run_err(&["--config", path.to_str().unwrap(), "gen-profiles"]);
    assert_eq!(out.status.code(), Some(2));
    // Config file named but absent.
    let out = run_err(&["--config", "/definitely/not/here.json", "gen-profiles"]);
    assert_eq!(out.status.code(), Some(2));
    // Structurally valid config rejected by a module validator.
    let path = tmp.path().join("zero.json");
    std::fs::write(&path, r#"{"profiles": {"count": 0}}"#).unwrap();
    let out = run_err(&["--config", path.to_str().unwrap(), "gen-profiles"]);
    assert_eq!(out.status.code(), Some(2));
    // Typos in nested sections must not silently fall back to defaults.
    let path = tmp.path().join("nested.json");
    std::fs::write(&path, r#"{"surrogate": {"epocs": 3}}"#).unwrap();
    let out = run_err(&["--config", path.to_str().unwrap(), "gen-profiles"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_3_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("never_written");
    let cfg = write_config(tmp.path(), &tiny_config(&out_dir, 5));
    for cmd in ["simulate", "make-dataset", "train", "predict", "report"] {
        let out = bin()
            .arg("--config")
            .arg(&cfg)
            .arg(cmd)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(3), "{cmd} should exit 3");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(
            stderr.contains("never_written"),
            "{cmd} stderr should name the missing path: {stderr}"
        );
    }
}
