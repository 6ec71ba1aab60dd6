use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drrho::experiments::{fit_scaling_law, ScalingPoint};
use drrho::format::sha256_hex;

fn drrho(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drrho"))
        .args(args)
        .env("DRRHO_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = drrho(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a reference cache in `dir`.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    ok(&[
        "gen-data", "--n", "160", "--d-x", "10", "--d-y", "10", "--d-latent", "3",
        "--seed", "2", "--output", s(dir),
    ]);
    let data = dir.join("data.dpd");
    ok(&[
        "ref-embed", "--data", s(&data), "--iterations", "30", "--batch-size", "16",
        "--output", s(dir),
    ]);
    (data, dir.join("cache.emb"))
}

fn digest(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| sha256_hex(&fs::read(p).unwrap())).collect()
}

#[test]
fn training_is_deterministic_and_leaves_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cache) = setup(tmp.path());
    let before = digest(&[&data, &cache]);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "train", "--method", "drrho-clip", "--data", s(&data), "--ref", s(&cache),
            "--iterations", "40", "--batch-size", "16", "--seed", "5", "--output", s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["report.json", "report.csv", "model.bin", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    assert_eq!(before, digest(&[&data, &cache]));

    ok(&[
        "eval", "--data", s(&data), "--model", s(&a.join("model.bin")), "--output", s(&a),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    assert!(summary.to_string().contains("recall"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = drrho(&["train", "--method", "bogus", "--data", "x", "--output", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--n", "100", "--d-x", "6", "--d-y", "6", "--d-latent", "2", "--output", s(tmp.path())]);
    let out = drrho(&[
        "train", "--method", "fastclip", "--data", s(&tmp.path().join("data.dpd")),
        "--gamma", "2", "--output", s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}

#[test]
fn missing_reference_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--n", "100", "--d-x", "6", "--d-y", "6", "--d-latent", "2", "--output", s(tmp.path())]);
    let out = drrho(&[
        "train", "--method", "drrho-clip", "--data", s(&tmp.path().join("data.dpd")),
        "--output", s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ref"));
}

#[test]
fn scaling_fit_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = [(1e4, 0.5), (3e4, 0.42), (1e5, 0.33), (4e5, 0.27), (2e6, 0.2)];
    let mut csv = String::from("compute,error\n");
    for (c, e) in rows {
        csv.push_str(&format!("{c},{e}\n"));
    }
    let path = tmp.path().join("points.csv");
    fs::write(&path, csv).unwrap();
    let out = ok(&["scaling-fit", s(&path), "--output", s(&tmp.path().join("fit"))]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let beta: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("beta = "))
        .unwrap()
        .parse()
        .unwrap();
    let points: Vec<ScalingPoint> = rows.iter().map(|&(c, e)| ScalingPoint::new(c, e).unwrap()).collect();
    assert_eq!(beta, fit_scaling_law(&points).unwrap().beta);
    assert!(tmp.path().join("fit").join("fit.json").exists());
}
