//! End-to-end CLI flow on a miniature scene: every subcommand in order,
//! exit-code conventions, and artifact determinism.

use std::path::Path;
use std::process::{Command, Output};

fn chartloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chartloc"))
        .args(args)
        .env("CHARTLOC_THREADS", "2")
        .output()
        .expect("spawn chartloc")
}

fn write_config(dir: &Path) -> String {
    let cfg = "\
n_bs=2
n_rx=4
n_sc=16
n_scatterers=2
noise_std=0.01
rng_seed=11
n_total=80
n_labeled=40
chart_variant=siamese
retrieval_variant=siamese
k_ref=4
chart_epochs=2
loc_epochs=2
enc_conv_channels=4,8
enc_hidden=24
node_dim=48
width_factor=0.1
bench_queries=100
bench_warmup=2
";
    let path = dir.join("exp.cfg");
    std::fs::write(&path, cfg).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_flow_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();

    for cmd in ["generate", "train-chart", "build-index", "train-loc"] {
        let r = chartloc(&[cmd, "--config", &cfg, "--out", &out_s]);
        assert!(
            r.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&r.stderr)
        );
    }
    let r = chartloc(&["evaluate", "--config", &cfg, "--out", &out_s, "--per-sample"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = chartloc(&["bench", "--config", &cfg, "--out", &out_s]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    for artifact in [
        "dataset.csids",
        "chart_siamese.nnck",
        "embeddings.csv",
        "index.json",
        "loc.nnck",
        "metrics.json",
        "per_sample.csv",
        "bench.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["mae"].as_f64().unwrap().is_finite());
    assert_eq!(metrics["n_test"], 40);
    assert_eq!(metrics["k"], 4);
    assert_eq!(metrics["retrieval_variant"], "siamese");
    assert!(metrics["wknn"]["mae"].as_f64().unwrap().is_finite());

    let csv = std::fs::read_to_string(out.join("per_sample.csv")).unwrap();
    assert!(csv.starts_with("index,x_true,y_true,x_hat,y_hat,error"));
    assert_eq!(csv.lines().count(), 41);

    let bench: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["n_queries"], 100);
    assert_eq!(bench["methods"].as_array().unwrap().len(), 3);
}

#[test]
fn generate_is_byte_identical_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = chartloc(&["generate", "--config", &cfg, "--out", &out.to_string_lossy()]);
        assert!(r.status.success());
    }
    let a = std::fs::read(out_a.join("dataset.csids")).unwrap();
    let b = std::fs::read(out_b.join("dataset.csids")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let r = chartloc(&["generate", "--config", &cfg, "--out", &out_a.to_string_lossy()]);
    assert!(r.status.success());
    let r = chartloc(&[
        "generate",
        "--config",
        &cfg,
        "--seed",
        "999",
        "--out",
        &out_b.to_string_lossy(),
    ]);
    assert!(r.status.success());
    let a = std::fs::read(out_a.join("dataset.csids")).unwrap();
    let b = std::fs::read(out_b.join("dataset.csids")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn evaluate_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    for cmd in ["generate", "train-chart", "train-loc"] {
        assert!(chartloc(&[cmd, "--config", &cfg, "--out", &out_s]).status.success());
    }
    assert!(chartloc(&["evaluate", "--config", &cfg, "--out", &out_s]).status.success());
    let first = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(chartloc(&["evaluate", "--config", &cfg, "--out", &out_s]).status.success());
    let second = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn invalid_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "n_total=10\nnot_a_real_key=5\n").unwrap();
    let r = chartloc(&[
        "generate",
        "--config",
        &path.to_string_lossy(),
        "--out",
        &dir.path().join("o").to_string_lossy(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("not_a_real_key"), "{stderr}");
}

#[test]
fn missing_checkpoint_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("fresh");
    let r = chartloc(&["train-loc", "--config", &cfg, "--out", &out.to_string_lossy()]);
    assert_eq!(r.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("missing"), "{stderr}");
}

#[test]
fn wknn_output_matches_direct_estimates() {
    // The metrics.json WKNN numbers must equal a direct wknn_estimate loop.
    use chartloc_core::retrieval::{build_db, wknn_estimate};
    use chartloc_core::ChartModel;

    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    for cmd in ["generate", "train-chart", "train-loc"] {
        assert!(chartloc(&[cmd, "--config", &cfg_path, "--out", &out_s]).status.success());
    }
    assert!(chartloc(&["evaluate", "--config", &cfg_path, "--out", &out_s]).status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();

    let samples = chartloc_core::sim::read_csids(out.join("dataset.csids")).unwrap();
    let chart = ChartModel::load(out.join("chart_siamese.nnck")).unwrap();
    let mut samples = samples;
    let test = samples.split_off(40);
    let db = build_db(samples, &chart).unwrap();
    let mae: f64 = test
        .iter()
        .map(|s| wknn_estimate(&db, &s.csi, 4).unwrap().dist(&s.position))
        .sum::<f64>()
        / test.len() as f64;
    let reported = metrics["wknn"]["mae"].as_f64().unwrap();
    assert!(
        (mae - reported).abs() < 1e-12,
        "direct {mae} vs reported {reported}"
    );
}
