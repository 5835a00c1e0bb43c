use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn debias(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = debias(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text.trim()).unwrap()
}

const SMALL: &str = r#"{"n_ids":20,"samples_per_id":6,"dim":16,"n_cameras":4,
    "intra_sigma":0.5,"camera_offset":3.0,"seed":3,"queries_per_id":1}"#;

fn small_bundle(dir: &Path) {
    fs::write(dir.join("synth.json"), SMALL).unwrap();
    ok(dir, &["synth", "--config", "synth.json", "--out", "bundle"]);
}

#[test]
fn synth_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    let meta = fs::read_to_string(dir.path().join("bundle/meta.json")).unwrap();
    assert_eq!(
        meta,
        "{\"n\":120,\"dim\":16,\"dtype\":\"f32le\",\"layout\":\"row-major\"}\n"
    );
    let bytes = fs::metadata(dir.path().join("bundle/embeddings.bin"))
        .unwrap()
        .len();
    assert_eq!(bytes, 120 * 16 * 4);
    let labels = fs::read_to_string(dir.path().join("bundle/labels.csv")).unwrap();
    assert!(labels.starts_with("index,pid,camid,domain,split,camstyle\n0,0,0,target,query,0\n"));
}

#[test]
fn stagewise_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bundle(d);
    let raw = json(&ok(d, &["eval", "--bundle", "bundle"]));
    let fixed = json(&ok(
        d,
        &[
            "camfix",
            "--bundle",
            "bundle",
            "--camera-mean",
            "--out",
            "cf",
        ],
    ));
    assert!(fixed["map"].as_f64() > raw["map"].as_f64());
    assert!(d.join("cf/features/embeddings.bin").exists());

    // camfix writes the query ++ gallery self matrix; eval picks the block.
    let again = json(&ok(d, &["eval", "--bundle", "bundle", "--dist", "cf"]));
    assert_eq!(again["map"], fixed["map"]);

    let rr = json(&ok(
        d,
        &[
            "rerank",
            "--dist",
            "cf",
            "--n-query",
            "20",
            "--k1",
            "10",
            "--k2",
            "3",
            "--out",
            "rr",
        ],
    ));
    assert_eq!(
        (rr["rows"].as_u64(), rr["cols"].as_u64()),
        (Some(20), Some(100))
    );
    let reranked = json(&ok(
        d,
        &["eval", "--bundle", "bundle", "--dist", "rr", "--out", "ev"],
    ));
    assert!(reranked["map"].as_f64().unwrap() > 0.0);
    assert!(d.join("ev/report.json").exists());

    ok(
        d,
        &[
            "rerank",
            "--dist",
            "cf",
            "--n-query",
            "20",
            "--lambda",
            "1",
            "--out",
            "same",
        ],
    );
    ok(
        d,
        &[
            "fuse",
            "--dist",
            "same,rr",
            "--weights",
            "1,0",
            "--out",
            "fused",
        ],
    );
    let a = fs::read(d.join("fused/dist.bin")).unwrap();
    let b = fs::read(d.join("same/dist.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bundle(d);
    ok(
        d,
        &[
            "camfix",
            "--bundle",
            "bundle",
            "--camera-mean",
            "--out",
            "cf",
        ],
    );
    for t in ["1", "4", "8"] {
        ok(
            d,
            &[
                "--threads",
                t,
                "rerank",
                "--dist",
                "cf",
                "--all",
                "--out",
                &format!("rr{t}"),
            ],
        );
    }
    let one = fs::read(d.join("rr1/dist.bin")).unwrap();
    assert_eq!(one, fs::read(d.join("rr4/dist.bin")).unwrap());
    assert_eq!(one, fs::read(d.join("rr8/dist.bin")).unwrap());
}

#[test]
fn run_writes_ladder_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bundle(d);
    fs::write(
        d.join("run.json"),
        r#"{"models":[{"bundle":"bundle"}],"stages":{"camera_mean":true,"rerank":{"k1":10,"k2":3,"lambda":0.3}},
            "out_dir":"out","seed":1}"#,
    )
    .unwrap();
    let table = ok(d, &["run", "--config", "run.json"]);
    assert!(table.contains("02_camera_mean") && table.contains("07_rerank"));
    assert!(d.join("out/model_0/07_rerank/dist.bin").exists());
    assert!(d.join("out/summary.json").exists());

    ok(d, &["run", "--config", "run.json", "--out", "elsewhere"]);
    assert!(d.join("elsewhere/report.json").exists());

    fs::write(
        d.join("bad.json"),
        r#"{"models":[{"bundle":"bundle"}],"stages":{"rerank":{"k1":500,"k2":3,"lambda":0.3}},"out_dir":"bad"}"#,
    )
    .unwrap();
    let out = debias(d, &["run", "--config", "bad.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("07_rerank"));
    assert!(d.join("bad/failed/model_0/04_distance/dist.bin").exists());

    fs::write(
        d.join("typo.json"),
        r#"{"models":[{"bundle":"bundle"}],"out_dir":"x","stagse":{}}"#,
    )
    .unwrap();
    assert!(!debias(d, &["run", "--config", "typo.json"])
        .status
        .success());
}

#[test]
fn cluster_from_matrix_and_from_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bundle(d);
    ok(
        d,
        &["camfix", "--bundle", "bundle", "--normalize", "--out", "cf"],
    );
    let summary = json(&ok(
        d,
        &[
            "cluster",
            "--dist",
            "cf",
            "--eps",
            "0.3",
            "--min-samples",
            "3",
            "--top",
            "5",
            "--singletons",
            "2",
            "--out",
            "labels.csv",
        ],
    ));
    assert!(summary["classes"].as_u64().unwrap() <= 5);
    let text = fs::read_to_string(d.join("labels.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("index,class,negatives_only"));
    assert_eq!(text.lines().count(), 121);

    // Test bundles have no train rows.
    let out = debias(d, &["cluster", "--bundle", "bundle", "--out", "l2.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}

#[test]
fn losses_and_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = ok(d, &["losses", "selftest"]);
    assert!(table.lines().count() > 5);
    assert!(!table.contains("FAIL"));

    assert_eq!(ok(d, &["schedule", "--epoch", "10"]).trim(), "0.02");
    let at50: f64 = ok(d, &["schedule", "--epoch", "50"])
        .trim()
        .parse()
        .unwrap();
    assert!((at50 - 0.0002).abs() < 1e-12);
    assert_eq!(ok(d, &["schedule"]).lines().count(), 60);
    assert!(!debias(d, &["schedule", "--epoch", "61"]).status.success());

    fs::write(d.join("s.json"), r#"{"base_lr":0.1,"warmup_epochs":1,"decay_epochs":[],"decay_factor":0.1,"total_epochs":5}"#).unwrap();
    assert_eq!(
        ok(d, &["schedule", "--config", "s.json", "--epoch", "5"]).trim(),
        "0.1"
    );
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!debias(d, &["eval", "--bundle", "missing"]).status.success());
    assert!(!debias(d, &["synth"]).status.success());
    assert!(!debias(d, &["frobnicate"]).status.success());
    small_bundle(d);
    fs::write(d.join("bundle/embeddings.bin"), [0u8; 12]).unwrap();
    let out = debias(d, &["eval", "--bundle", "bundle"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inconsistent bundle"));
}
