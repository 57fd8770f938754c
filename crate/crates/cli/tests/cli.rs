//! End-to-end tests driving the installed binary, covering the pipeline
//! chain, exit codes, and manifest stability.

use std::path::Path;
use std::process::{Command, Output};

fn standseg(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_standseg"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("spawn standseg")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit2(out: &Output, what: &str) {
    assert_eq!(out.status.code(), Some(2), "{what} should exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{what}: expected one-line reason, got {stderr:?}");
    assert!(lines[0].starts_with("error: "), "{what}: got {stderr:?}");
}

/// Small-model config so the training steps stay fast.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "tile_pixels": 32,
  "model": {"base_filters": 4, "depth": 2},
  "train": {"max_epochs": 2, "batch_size": 4, "learning_rate": 1e-4, "seed": 7},
  "search": {
    "base_filters": [4, 4],
    "filter_sizes": [3],
    "learning_rate": [1e-4, 1e-3],
    "dropout_rate": [0.0, 0.1],
    "alpha": [0.4, 0.6],
    "gamma": [1.0, 2.0]
  }
}
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir);
    let config = config.to_str().unwrap();

    let out = standseg(dir, &["--seed", "3", "synth", "--width", "128", "--height", "96", "--n-stands", "10"]);
    assert_ok(&out, "synth");
    for f in ["spectral.rstr", "points.xyz", "stands.geojson", "classes.rstr", "manifest.json"] {
        assert!(dir.join("synth").join(f).is_file(), "missing synth/{f}");
    }

    let spectral = dir.join("synth/spectral.rstr");
    let out = standseg(
        dir,
        &[
            "build-chm",
            "--points",
            dir.join("synth/points.xyz").to_str().unwrap(),
            "--like",
            spectral.to_str().unwrap(),
        ],
    );
    assert_ok(&out, "build-chm");

    let out = standseg(dir, &["stack", "--spectral", spectral.to_str().unwrap()]);
    assert_ok(&out, "stack");

    let out = standseg(
        dir,
        &[
            "--config",
            config,
            "tile",
            "--stands",
            dir.join("synth/stands.geojson").to_str().unwrap(),
        ],
    );
    assert_ok(&out, "tile");
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("tiles/tiles.json")).unwrap())
            .unwrap();
    assert_eq!(index["tile_pixels"], 32, "tile size comes from the config");
    assert_eq!(index["tiles"].as_array().unwrap().len(), 12, "128x96 / 32 = 4x3 tiles");

    let out = standseg(dir, &["--seed", "1", "split", "--fractions", "0.5,0.25,0.25"]);
    assert_ok(&out, "split");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("6 train / 3 val / 3 test"), "got {stdout}");

    let out = standseg(dir, &["--config", config, "train"]);
    assert_ok(&out, "train");
    assert!(dir.join("train/best.unw1").is_file());
    assert!(dir.join("train/history.jsonl").is_file());

    let out = standseg(dir, &["--config", config, "evaluate", "--split", "test"]);
    assert_ok(&out, "evaluate");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("evaluate/metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["oa"].is_number());
    assert!(metrics["mmcc"].is_number());
    assert_eq!(metrics["per_class"].as_array().unwrap().len(), 5);
    let csv = std::fs::read_to_string(dir.join("evaluate/matrix.csv")).unwrap();
    assert!(csv.starts_with("predicted,"), "got {csv}");
    assert!(csv.lines().any(|l| l.starts_with("Sum,")));
    assert!(csv.lines().any(|l| l.starts_with("PA,")));

    let out = standseg(
        dir,
        &["--config", config, "evaluate", "--split", "test", "--mmu", "--min-area-ha", "0.0005"],
    );
    assert_ok(&out, "evaluate --mmu");

    let out = standseg(
        dir,
        &["--config", config, "predict", "--tile-pixels", "64", "--overlap", "16"],
    );
    assert_ok(&out, "predict");
    assert!(dir.join("predict/classmap.rstr").is_file());

    let out = standseg(dir, &["vectorize", "--min-area-ha", "0.0005"]);
    assert_ok(&out, "vectorize");
    let geojson = std::fs::read_to_string(dir.join("vectorize/stands.geojson")).unwrap();
    assert!(geojson.contains("FeatureCollection"));

    let out = standseg(dir, &["report"]);
    assert_ok(&out, "report");
    let svg = std::fs::read_to_string(dir.join("report/history.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("stroke-dasharray"), "best-epoch marker missing");
    assert!(svg.matches("<polyline").count() >= 4, "expected 4 series polylines");
    assert!(
        dir.join("report/matrix.csv").is_file(),
        "report should re-emit the matrix when metrics exist"
    );
}

#[test]
fn validation_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    assert_exit2(
        &standseg(dir, &["evaluate"]),
        "evaluate without tiles or weights",
    );
    assert_exit2(
        &standseg(dir, &["split", "--fractions", "0.5,0.5"]),
        "two fractions",
    );
    assert_exit2(&standseg(dir, &["report"]), "report without history");
    assert_exit2(&standseg(dir, &["stack"]), "stack without inputs");
    assert_exit2(
        &standseg(dir, &["build-chm", "--points", "nope.xyz"]),
        "missing point cloud",
    );

    // evaluate with an unknown split name needs tiles to exist first; the
    // split-name check fires before any model loading
    let out = standseg(dir, &["synth", "--width", "64", "--height", "64", "--n-stands", "4"]);
    assert_ok(&out, "synth");
    assert_exit2(
        &standseg(dir, &["evaluate", "--split", "foo"]),
        "unknown split name",
    );

    let bad_config = dir.join("bad.json");
    std::fs::write(&bad_config, r#"{"tile_pixelz": 32}"#).unwrap();
    assert_exit2(
        &standseg(dir, &["--config", bad_config.to_str().unwrap(), "synth"]),
        "unknown config key",
    );

    // clap usage errors share the validation exit code
    let out = standseg(dir, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manifests_are_hash_stable_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--seed", "11", "synth", "--width", "64", "--height", "64", "--n-stands", "6"];
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    assert_ok(&standseg(&dir_a, &args), "synth a");
    assert_ok(&standseg(&dir_b, &args), "synth b");
    let manifest_a = std::fs::read(dir_a.join("synth/manifest.json")).unwrap();
    let manifest_b = std::fs::read(dir_b.join("synth/manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b, "same flags must produce identical manifests");
    assert_eq!(
        std::fs::read(dir_a.join("synth/spectral.rstr")).unwrap(),
        std::fs::read(dir_b.join("synth/spectral.rstr")).unwrap(),
    );
}

#[test]
fn split_is_deterministic_and_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(
        &standseg(dir, &["--seed", "5", "synth", "--width", "128", "--height", "128"]),
        "synth",
    );
    assert_ok(
        &standseg(
            dir,
            &[
                "build-chm",
                "--points",
                dir.join("synth/points.xyz").to_str().unwrap(),
                "--like",
                dir.join("synth/spectral.rstr").to_str().unwrap(),
            ],
        ),
        "build-chm",
    );
    assert_ok(
        &standseg(dir, &["stack", "--spectral", dir.join("synth/spectral.rstr").to_str().unwrap()]),
        "stack",
    );
    assert_ok(
        &standseg(
            dir,
            &[
                "tile",
                "--stands",
                dir.join("synth/stands.geojson").to_str().unwrap(),
                "--size",
                "32",
            ],
        ),
        "tile",
    );

    let split_args = ["--seed", "42", "split", "--fractions", "0.7,0.15,0.15"];
    assert_ok(&standseg(dir, &split_args), "split 1");
    let first = std::fs::read(dir.join("tiles/tiles.json")).unwrap();
    let manifest = std::fs::read_to_string(dir.join("split/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    let counts = manifest["parameters"]["counts"].as_array().unwrap();
    let total: u64 = counts.iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total, 16, "4x4 tiles of 32px from 128x128");

    assert_ok(&standseg(dir, &split_args), "split 2");
    let second = std::fs::read(dir.join("tiles/tiles.json")).unwrap();
    assert_eq!(first, second, "same seed must reproduce the split");
}

#[test]
fn threads_flag_and_env_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_standseg"))
        .arg("--workdir")
        .arg(dir)
        .args(["--threads", "2", "synth", "--width", "64", "--height", "64", "--n-stands", "4"])
        .output()
        .unwrap();
    assert_ok(&out, "synth with --threads");

    let out = Command::new(env!("CARGO_BIN_EXE_standseg"))
        .arg("--workdir")
        .arg(dir)
        .env("STANDSEG_THREADS", "not-a-number")
        .args(["synth"])
        .output()
        .unwrap();
    assert_exit2(&out, "garbage STANDSEG_THREADS");
}

#[test]
fn tune_writes_journal_and_best_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir);
    let config = config.to_str().unwrap();
    assert_ok(
        &standseg(dir, &["--seed", "5", "synth", "--width", "128", "--height", "64", "--n-stands", "8"]),
        "synth",
    );
    assert_ok(
        &standseg(
            dir,
            &[
                "build-chm",
                "--points",
                dir.join("synth/points.xyz").to_str().unwrap(),
                "--like",
                dir.join("synth/spectral.rstr").to_str().unwrap(),
            ],
        ),
        "build-chm",
    );
    assert_ok(
        &standseg(dir, &["stack", "--spectral", dir.join("synth/spectral.rstr").to_str().unwrap()]),
        "stack",
    );
    assert_ok(
        &standseg(
            dir,
            &["--config", config, "tile", "--stands", dir.join("synth/stands.geojson").to_str().unwrap()],
        ),
        "tile",
    );
    assert_ok(&standseg(dir, &["--seed", "1", "split"]), "split");
    assert_ok(
        &standseg(dir, &["--config", config, "--seed", "9", "tune", "--trials", "2"]),
        "tune",
    );

    let journal = std::fs::read_to_string(dir.join("tune/journal.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = journal
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        events.iter().filter(|e| e["event"] == "start").count(),
        2,
        "one start per trial"
    );
    assert!(events.iter().any(|e| e["event"] == "complete"));
    let best: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("tune/best.json")).unwrap())
            .unwrap();
    assert!(best["val_mmcc"].is_number());
    assert!(best["params"]["base_filters"].is_number());
}
