mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn caac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caac"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn calibrate_writes_one_vector_per_head() {
    let d = tempfile::tempdir().unwrap();
    let out = caac(d.path(), &["calibrate", "--out", "o"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let w = common::frozen_world();
    let (l, h) = (w.config.num_layers, w.config.num_heads);
    assert_eq!(stdout.matches("flattened spread").count(), l * h);
    let cal = read_json(&d.path().join("o/calibration.json"));
    assert_eq!(cal["vectors"].as_array().unwrap().len(), l * h);
    assert!(d.path().join("o/effective_config.json").exists());
}

#[test]
fn noise_reference_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let w = common::frozen_world();
    let cfg = write_config(
        d.path(),
        &json!({
            "reference": {
                "image_kind": { "noise": { "seed": 7 } },
                "query_ids": w.vocab.generic_query(),
                "window": 2,
            }
        }),
    );
    ok(&caac(d.path(), &["calibrate", "-c", &cfg, "--out", "a"]));
    ok(&caac(d.path(), &["calibrate", "-c", &cfg, "--out", "b"]));
    let a = std::fs::read(d.path().join("a/calibration.json")).unwrap();
    let b = std::fs::read(d.path().join("b/calibration.json")).unwrap();
    assert_eq!(a, b);
    let black = d.path().join("black");
    ok(&caac(
        d.path(),
        &["calibrate", "--out", black.to_str().unwrap()],
    ));
    assert_ne!(a, std::fs::read(black.join("calibration.json")).unwrap());
}

#[test]
fn bad_config_exits_with_code_2() {
    let d = tempfile::tempdir().unwrap();
    let out = caac(d.path(), &["eval", "--beta", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));

    let cfg = write_config(d.path(), &json!({ "betta": 0.3 }));
    let out = caac(d.path(), &["eval", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("betta"));

    let out = caac(d.path(), &["eval", "--cell", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_calibration_exits_with_code_4() {
    let d = tempfile::tempdir().unwrap();
    let out = caac(d.path(), &["run", "--out", "o"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));
}

#[test]
fn numeric_failure_exits_with_code_3() {
    let d = tempfile::tempdir().unwrap();
    let out = caac(
        d.path(),
        &[
            "run",
            "--cell",
            "aar-only",
            "--p-thr",
            "1",
            "--lambda-max",
            "1e308",
            "--seeds",
            "1",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn inert_settings_reproduce_the_baseline_report() {
    let d = tempfile::tempdir().unwrap();
    ok(&caac(
        d.path(),
        &[
            "eval", "--cell", "baseline", "--seeds", "10", "--out", "base",
        ],
    ));
    ok(&caac(
        d.path(),
        &[
            "eval", "--beta", "0", "--p-thr", "0", "--seeds", "10", "--out", "inert",
        ],
    ));
    let a = std::fs::read(d.path().join("base/report.json")).unwrap();
    let b = std::fs::read(d.path().join("inert/report.json")).unwrap();
    assert_eq!(a, b);
    let a = std::fs::read(d.path().join("base/traces.jsonl")).unwrap();
    let b = std::fs::read(d.path().join("inert/traces.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_matches_the_frozen_results() {
    let d = tempfile::tempdir().unwrap();
    ok(&caac(d.path(), &["calibrate", "--out", "o"]));
    ok(&caac(d.path(), &["ablate", "--out", "o"]));
    let o = d.path().join("o");
    let expected = read_json(&common::golden_path("ablation.json"));
    common::assert_close(&expected, &read_json(&o.join("ablation.json")), "ablation");
    for f in ["ablation.csv", "ablation.svg"] {
        assert!(o.join(f).exists(), "{f}");
    }
    for cell in ["baseline", "vtc_only", "aar_only", "both"] {
        let traces = std::fs::read_to_string(o.join(format!("traces_{cell}.jsonl"))).unwrap();
        assert!(!traces.is_empty());
    }
}

#[test]
fn relevancy_reports_decay_on_the_baseline() {
    let d = tempfile::tempdir().unwrap();
    ok(&caac(
        d.path(),
        &["relevancy", "--cell", "baseline", "--out", "o"],
    ));
    let o = d.path().join("o");
    let summary = read_json(&o.join("relevancy.json"));
    let corr = summary["decay_correlation"].as_f64().unwrap();
    assert!(corr < -0.5, "{corr}");
    for f in [
        "relevancy.csv",
        "decay.csv",
        "concentration.csv",
        "decay.svg",
        "concentration.svg",
        "confidence.svg",
        "report.json",
    ] {
        assert!(o.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(o.join("relevancy.csv")).unwrap();
    assert!(csv.starts_with("seed,position,r_rel,p_t,label\n"));
}

#[test]
fn traces_are_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    ok(&caac(d.path(), &["calibrate", "--out", "o"]));
    for out in ["r1", "r2"] {
        ok(&caac(
            d.path(),
            &[
                "run",
                "--calibration",
                "o/calibration.json",
                "--seeds",
                "20",
                "--out",
                out,
            ],
        ));
    }
    let a = std::fs::read(d.path().join("r1/traces.jsonl")).unwrap();
    let b = std::fs::read(d.path().join("r2/traces.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn default_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let out = caac(d.path(), &["default-config"]);
    ok(&out);
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, &out.stdout).unwrap();
    let out = caac(
        d.path(),
        &[
            "eval",
            "-c",
            cfg.to_str().unwrap(),
            "--cell",
            "baseline",
            "--seeds",
            "2",
            "--out",
            "o",
        ],
    );
    ok(&out);
    let effective = read_json(&d.path().join("o/effective_config.json"));
    assert_eq!(effective["seeds"], json!({ "start": 0, "count": 2 }));
}
