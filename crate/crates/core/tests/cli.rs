use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cns_eval::metrics::accuracy_by_scale;
use cns_eval::report::fmt_float;
use cns_eval::{load_manifest, metrics::PredictionLog};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cns-eval"))
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_summarizes_grid_fixture() {
    let m = fixture("grid24/manifest.jsonl");
    let o = run(&["validate", "--manifest", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).lines().next(),
        Some("records=24 trajectories=4 complete=4")
    );
}

#[test]
fn eval_without_predictions_is_missing_input() {
    let m = fixture("grid24/manifest.jsonl");
    let o = run(&["eval", "--manifest", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).starts_with("code=MISSING_INPUT"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_flag_and_missing_file_exit_two() {
    let o = run(&["validate", "--manifesto", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("code=USAGE"));
    let o = run(&["validate", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("code=IO"));
}

#[test]
fn invalid_manifest_is_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    std::fs::write(
        &p,
        r#"{"image_id":"a","class_index":1,"class_name":"x","shift":"snow","scale":0.7,"seed":0,"relpath":"a.png"}"#,
    )
    .unwrap();
    let o = run(&["validate", "--manifest", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("code=INVARIANT"), "{}", stderr(&o));
    std::fs::write(&p, "{not json\n").unwrap();
    let o = run(&["validate", "--manifest", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("code=PARSE"));
}

#[test]
fn report_csv_matches_metrics_module() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "report",
        "--input-dir",
        fixture("grid24").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
    let m = load_manifest(fixture("grid24/manifest.jsonl")).unwrap();
    let preds = PredictionLog::load(fixture("grid24/predictions.jsonl"), Some(&m)).unwrap();
    let table = accuracy_by_scale(&preds, &m, None).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1] == "all" {
            continue;
        }
        let scale = cns_eval::Scale::from_f64(f[2].parse().unwrap()).unwrap();
        let cell = table.get(f[0], f[1], scale).unwrap();
        assert_eq!(f[5], fmt_float(cell.accuracy()));
        assert_eq!(
            (f[3].parse::<u64>().unwrap(), f[4].parse::<u64>().unwrap()),
            (cell.correct, cell.total)
        );
        rows += 1;
    }
    assert_eq!(rows, table.len());
}

#[test]
fn scores_calibrate_filter_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mini = fixture("mini");
    let p = |s: &str| d.join(s).to_str().unwrap().to_string();
    let m = mini.join("manifest.jsonl");
    let o = run(&[
        "scores",
        "--manifest",
        m.to_str().unwrap(),
        "--embeddings",
        mini.join("embeddings").to_str().unwrap(),
        "--out",
        &p("scores.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "scored=72");
    let o = run(&[
        "calibrate",
        "--scores",
        &p("scores.jsonl"),
        "--labels",
        mini.join("labels.jsonl").to_str().unwrap(),
        "--out",
        &p("cal.json"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cal: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cal.json")).unwrap()).unwrap();
    for key in [
        "tau_text_plain",
        "tau_text_shift",
        "tau_feat_clip",
        "tau_feat_dino",
        "target_tpr",
        "vote_k",
    ] {
        assert!(cal.get(key).is_some(), "{key}");
    }
    let o = run(&[
        "filter",
        "--scores",
        &p("scores.jsonl"),
        "--calibration",
        &p("cal.json"),
        "--out",
        &p("verdicts.jsonl"),
        "--labels",
        mini.join("labels.jsonl").to_str().unwrap(),
        "--prefilter",
        "--manifest",
        m.to_str().unwrap(),
        "--predictions",
        mini.join("predictions.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("images=72 removed="), "{out}");
    assert!(out.contains("prefiltered_trajectories="));
    assert!(out.contains("tpr="));
    let o = run(&[
        "eval",
        "--manifest",
        m.to_str().unwrap(),
        "--predictions",
        mini.join("predictions.jsonl").to_str().unwrap(),
        "--verdicts",
        &p("verdicts.jsonl"),
        "--out-dir",
        &p("eval"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains(
        "model=alexnet baseline=alexnet mce=1.0000000000000000e0 mean_rce=1.0000000000000000e0"
    ));
    for f in ["accuracy.csv", "drops.json", "corruption.json"] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }
}

#[test]
fn rank_and_fp_on_grid_fixture() {
    let m = fixture("grid24/manifest.jsonl");
    let pr = fixture("grid24/predictions.jsonl");
    let base = [
        "--manifest",
        m.to_str().unwrap(),
        "--predictions",
        pr.to_str().unwrap(),
    ];
    let o = run(&[&["rank"][..], &base, &["--shift", "snow", "--scale", "2"]].concat());
    assert_eq!(
        stdout(&o),
        "rank=1 models=resnet50\nrank=2 models=alexnet\n"
    );
    let o = run(&[&["fp"][..], &base].concat());
    let out = stdout(&o);
    assert!(out.contains("model=alexnet shift=snow counts=0:0,0.5:0,1:2,1.5:0,2:2,2.5:0 none=0 base=0 trajectories=4"));
    assert!(out.contains("model=resnet50 shift=snow counts=0:0,0.5:0,1:0,1.5:1,2:0,2.5:0 none=3 base=0 trajectories=4"));
    let o = run(&[&["rank"][..], &base, &["--shift", "snow", "--scale", "0.7"]].concat());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_cap_does_not_change_output() {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, threads) in dirs.iter().zip(["1", "3"]) {
        let o = bin()
            .env("CNS_EVAL_THREADS", threads)
            .args([
                "report",
                "--input-dir",
                fixture("mini").to_str().unwrap(),
                "--out-dir",
            ])
            .arg(d.path())
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["report.json", "accuracy.csv", "failure_hist.svg"] {
        assert_eq!(
            std::fs::read(dirs[0].path().join(f)).unwrap(),
            std::fs::read(dirs[1].path().join(f)).unwrap()
        );
    }
    let o = bin()
        .env("CNS_EVAL_THREADS", "many")
        .args([
            "validate",
            "--manifest",
            fixture("grid24/manifest.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn slider_demo_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.json");
    let o = run(&[
        "slider-demo",
        "--d-in",
        "3",
        "--d-out",
        "2",
        "--rank",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!(v["closed_form_residual"].as_f64().unwrap() < 1e-6);
    assert_eq!(v["final_delta"].as_array().unwrap().len(), 2);
    // 50 steps, last 75% active: steps 13..50
    assert_eq!(v["active_steps"].as_array().unwrap().len(), 37);
}
