use std::path::Path;
use std::process::{Command, Output};

use femdiff::metrics::read_report;
use femdiff::Field;

fn femdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_femdiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = femdiff(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

const SMALL: &[&str] = &["--set", "mesh.nx=4", "--set", "mesh.ny=4", "--set", "mesh.levels=2", "--set", "schedule.steps=30"];

fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = SMALL.to_vec();
    v.extend_from_slice(args);
    v
}

#[test]
fn oracle_sampling_is_reproducible_across_runs_and_threads() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &with(&["--seed", "5", "--out", "a", "sample", "--oracle", "--count", "4"]));
    ok(t.path(), &with(&["--seed", "5", "--out", "b", "--threads", "3", "sample", "--oracle", "--count", "4"]));
    let a = read_dir_bytes(&t.path().join("a/samples"));
    assert_eq!(a.len(), 4);
    assert_eq!(a, read_dir_bytes(&t.path().join("b/samples")));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(t.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "sample");
    assert_eq!(run["seed"], 5);
    assert!(run["config"].as_str().unwrap().contains("steps = 30"));
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn dps_without_guidance_matches_plain_sampling() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &with(&["--out", "d", "--set", "data.count=4", "gen-data"]));
    ok(t.path(), &with(&["--seed", "2", "--out", "s", "sample", "--oracle", "--count", "3"]));
    ok(
        t.path(),
        &with(&[
            "--seed", "2", "--out", "p", "--set", "guidance.zeta=0", "posterior", "--oracle", "--truth",
            "d/train/00000.fld", "--sensors", "4", "--method", "dps", "--chains", "3",
        ]),
    );
    assert_eq!(
        read_dir_bytes(&t.path().join("s/samples")),
        read_dir_bytes(&t.path().join("p/ensemble"))
    );
}

#[test]
fn eval_on_perfect_ensemble_reports_zero() {
    let t = tempfile::tempdir().unwrap();
    let truth = Field::scalar(vec![0.5, 1.0, -2.0]);
    std::fs::create_dir(t.path().join("ens")).unwrap();
    truth.save(t.path().join("truth.fld")).unwrap();
    for k in 0..3 {
        truth.save(t.path().join(format!("ens/{k:05}.fld"))).unwrap();
    }
    ok(t.path(), &["--out", "e", "eval", "--ensemble", "ens", "--truth", "truth.fld"]);
    let recs = read_report(&std::fs::read_to_string(t.path().join("e/report.jsonl")).unwrap()).unwrap();
    let get = |m: &str| recs.iter().find(|r| r.metric == m).unwrap().mean;
    assert_eq!(get("rmse"), 0.0);
    assert_eq!(get("energy_score"), 0.0);
    assert!(t.path().join("e/metrics.csv").exists());
}

#[test]
fn bad_configuration_lists_every_key() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.ini"), "[mesh]\nnx = many\n[model]\npatch = 1\ncolour = red\n").unwrap();
    let o = femdiff(t.path(), &["--config", "c.ini", "--out", "x", "mesh"]);
    assert_eq!(o.status.code(), Some(1));
    let rec: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(rec["error"], "config");
    let details: Vec<String> = rec["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    for key in ["mesh.nx", "model.patch", "model.colour"] {
        assert!(details.iter().any(|d| d.starts_with(key)), "{key} not in {details:?}");
    }
    let o = femdiff(t.path(), &["--out", "x", "train", "--data", "missing"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data missing"));
}

#[test]
fn small_pipeline_with_network() {
    let t = tempfile::tempdir().unwrap();
    let net = [
        "--set", "model.hidden=4", "--set", "model.time_dim=4", "--set", "model.patch=3", "--set",
        "training.iterations=3", "--set", "data.count=10",
    ];
    let run = |extra: &[&str]| {
        let mut v = with(&net);
        v.extend_from_slice(extra);
        ok(t.path(), &v);
    };
    run(&["--out", "mesh", "mesh"]);
    assert!(t.path().join("mesh/hierarchy.json").exists());
    run(&["--out", "data", "gen-data"]);
    run(&["--out", "train", "train", "--data", "data"]);
    let loss = std::fs::read_to_string(t.path().join("train/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    run(&["--out", "samp", "sample", "--checkpoint", "train/model.ckpt", "--count", "2"]);
    run(&[
        "--set", "guidance.n_levels=3", "--set", "guidance.langevin_steps=2", "--out", "post", "posterior",
        "--checkpoint", "train/model.ckpt", "--truth", "data/test/00000.fld", "--sensors", "3", "--chains", "2",
        "--method", "daps",
    ]);
    run(&[
        "--out", "eval", "eval", "--ensemble", "post/ensemble", "--truth", "data/test/00000.fld", "--samples",
        "samp/samples", "--reference", "data/train", "--noise-baseline",
    ]);
    let recs = read_report(&std::fs::read_to_string(t.path().join("eval/report.jsonl")).unwrap()).unwrap();
    assert_eq!(recs.len(), 4);
}
