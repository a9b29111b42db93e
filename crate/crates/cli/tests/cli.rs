use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn agbmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agbmap"))
        .args(args)
        .output()
        .expect("spawn agbmap")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_world(dir: &Path, seed: u64) -> PathBuf {
    let world = dir.join("world");
    ok_json(&agbmap(&["synth-world", "--out-dir", s(&world), "--seed", &seed.to_string(), "--tiny"]));
    world
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(agbmap(&["--help"]).status.code(), Some(0));
    assert_eq!(agbmap(&["--version"]).status.code(), Some(0));
    assert_eq!(agbmap(&["run", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(agbmap(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(agbmap(&["run"]).status.code(), Some(1));
    assert_eq!(agbmap(&["predict", "--model", "m.json"]).status.code(), Some(1));
}

#[test]
fn missing_config_exits_one() {
    let out = agbmap(&["run", "--config", "/nonexistent/pipeline.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn logs_are_json_lines_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let world = tiny_world(dir.path(), 5);
    let out = agbmap(&["run", "--config", s(&world.join("pipeline.json")), "--learners", "gbdt"]);
    ok_json(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert!(!lines.is_empty());
    for line in lines {
        let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"));
        assert!(v.get("level").is_some());
    }
}

#[test]
fn run_writes_manifest_and_reports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let world = tiny_world(dir.path(), 11);
    let out_dir = dir.path().join("out");
    let out = agbmap(&[
        "--threads",
        "1",
        "run",
        "--config",
        s(&world.join("pipeline.json")),
        "--out-dir",
        s(&out_dir),
        "--k",
        "3",
    ]);
    let summary = ok_json(&out);
    let stages: Vec<&str> = summary["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(
        stages,
        [
            "filter_quality",
            "build_stack",
            "filter_sar",
            "calibration",
            "cv_random_forest",
            "cv_gbdt",
            "mask",
            "evaluate"
        ]
    );
    assert!(out_dir.join("run_manifest.json").exists());
    for learner in ["random_forest", "gbdt"] {
        for f in ["fold_0.tif", "fold_2.tif", "mean.tif", "std.tif", "mean_masked.tif", "metrics.json"] {
            assert!(out_dir.join(learner).join(f).exists(), "{learner}/{f}");
        }
        assert!(!out_dir.join(learner).join("fold_3.tif").exists());
    }
}

#[test]
fn missing_input_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let world = tiny_world(dir.path(), 2);
    std::fs::remove_file(world.join("footprints.csv")).unwrap();
    let out = agbmap(&["run", "--config", s(&world.join("pipeline.json"))]);
    assert_eq!(out.status.code(), Some(1));
    // validation happens before any stage writes output
    assert!(!world.join("run").join("quality_retained.csv").exists());
}

#[test]
fn stage_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let world = tiny_world(dir.path(), 4);
    // move every plot far from the footprints so calibration has nothing to fit
    let plots = std::fs::read_to_string(world.join("plots.csv")).unwrap();
    let mut moved = String::new();
    for (i, line) in plots.lines().enumerate() {
        if i == 0 {
            moved.push_str(line);
        } else {
            let mut cols: Vec<String> = line.split(',').map(String::from).collect();
            cols[1] = "10.0".into();
            moved.push('\n');
            moved.push_str(&cols.join(","));
        }
    }
    moved.push('\n');
    std::fs::write(world.join("plots.csv"), moved).unwrap();
    let out = agbmap(&["run", "--config", s(&world.join("pipeline.json"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(world.join("run").join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed_stage"], "calibration");
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let world = tiny_world(d, 9);

    let q = ok_json(&agbmap(&[
        "filter-quality",
        "--in",
        s(&world.join("footprints.csv")),
        "--out",
        s(&d.join("q.csv")),
        "--rejects",
        s(&d.join("q_rej.csv")),
    ]));
    assert_eq!(
        q["loaded"].as_u64().unwrap(),
        q["retained"].as_u64().unwrap() + q["rejected"].as_u64().unwrap() + q["malformed_rows"].as_u64().unwrap()
    );
    let relaxed = ok_json(&agbmap(&[
        "filter-quality",
        "--in",
        s(&world.join("footprints.csv")),
        "--out",
        s(&d.join("q2.csv")),
        "--allow-day",
        "--allow-coverage-beams",
    ]));
    assert!(relaxed["retained"].as_u64() > q["retained"].as_u64());

    let st = ok_json(&agbmap(&[
        "build-stack",
        "--config",
        s(&world.join("stack_config.json")),
        "--out-dir",
        s(&d.join("stack")),
    ]));
    assert_eq!(st["layers"].as_array().unwrap().len(), 25);
    let stack = d.join("stack").join("stack.json");

    // pairs on a known saturating HV curve with a small deterministic wiggle
    let mut pairs = String::from("rh,gamma_db\n");
    for i in 0..200 {
        let h = 1.0 + i as f64 * 0.2;
        let wiggle = 0.3 * ((i * 7919) % 13) as f64 / 13.0 - 0.15;
        pairs.push_str(&format!("{h},{}\n", -10.0 - 15.0 * (-0.07 * h).exp() + wiggle));
    }
    std::fs::write(d.join("pairs.csv"), pairs).unwrap();
    let curve = d.join("hv.json");
    let fit = ok_json(&agbmap(&[
        "fit-sar-curve",
        "--pairs",
        s(&d.join("pairs.csv")),
        "--polarization",
        "HV",
        "--out",
        s(&curve),
    ]));
    assert!(fit["r2"].as_f64().unwrap() > 0.99, "{fit}");

    let sarf = ok_json(&agbmap(&[
        "filter-sar",
        "--in",
        s(&d.join("q.csv")),
        "--curves",
        s(&curve),
        "--stack",
        s(&stack),
        "--out",
        s(&d.join("sar.csv")),
        "--rejects",
        s(&d.join("sar_rej.csv")),
    ]));
    assert_eq!(sarf["loaded"], q["retained"]);
    assert!(sarf["retained"].as_u64().unwrap() > 0);

    let model = d.join("rh_agb.json");
    let allo = ok_json(&agbmap(&[
        "fit-allometry",
        "--plots",
        s(&world.join("plots.csv")),
        "--trees",
        s(&world.join("trees.csv")),
        "--footprints",
        s(&d.join("sar.csv")),
        "--out",
        s(&model),
    ]));
    assert!(allo["plots_matched"].as_u64().unwrap() >= 3);

    let samples = d.join("samples.csv");
    let lab = ok_json(&agbmap(&[
        "label",
        "--footprints",
        s(&d.join("sar.csv")),
        "--model",
        s(&model),
        "--stack",
        s(&stack),
        "--out",
        s(&samples),
    ]));
    assert_eq!(lab["n_features"], 25);

    let fitted = d.join("gbdt.json");
    ok_json(&agbmap(&[
        "train",
        "--stack",
        s(&stack),
        "--samples",
        s(&samples),
        "--learner",
        "lightgbm",
        "--n-trees",
        "20",
        "--out",
        s(&fitted),
    ]));
    let pred = ok_json(&agbmap(&[
        "predict",
        "--model",
        s(&fitted),
        "--stack",
        s(&stack),
        "--chunk-rows",
        "7",
        "--out",
        s(&d.join("map.tif")),
    ]));
    assert_eq!(pred["pixels"], 64 * 64);

    let cv = ok_json(&agbmap(&[
        "cv-run",
        "--samples",
        s(&samples),
        "--stack",
        s(&stack),
        "--learner",
        "rf",
        "--n-trees",
        "10",
        "--k",
        "3",
        "--out-dir",
        s(&d.join("cv")),
    ]));
    assert_eq!(cv["report"]["fold_metrics"].as_array().unwrap().len(), 3);

    let maps: Vec<String> = (0..3).map(|i| s(&d.join("cv").join(format!("fold_{i}.tif"))).to_string()).collect();
    ok_json(&agbmap(&[
        "ensemble",
        "--maps",
        &maps.join(","),
        "--out-mean",
        s(&d.join("mean.tif")),
        "--out-std",
        s(&d.join("std.tif")),
    ]));
    let a = std::fs::read(d.join("mean.tif")).unwrap();
    let b = std::fs::read(d.join("cv").join("mean.tif")).unwrap();
    assert_eq!(a, b, "ensemble of fold maps matches cv-run's mean");

    ok_json(&agbmap(&[
        "build-mask",
        "--cover",
        s(&world.join("rasters/cover2000.tif")),
        "--loss",
        s(&world.join("rasters/lossyear.tif")),
        "--gain",
        s(&world.join("rasters/gain.tif")),
        "--out",
        s(&d.join("mask.tif")),
    ]));

    let ev = ok_json(&agbmap(&[
        "evaluate",
        "--map",
        s(&d.join("mean.tif")),
        "--plots",
        s(&world.join("plots.csv")),
        "--trees",
        s(&world.join("trees.csv")),
        "--out",
        s(&d.join("eval.json")),
    ]));
    assert!(ev["report"]["n"].as_u64().unwrap() > 0);
    assert!(d.join("eval.pairs.csv").exists());
}

#[test]
fn unknown_learner_is_rejected() {
    let out = agbmap(&[
        "train", "--stack", "x", "--samples", "y", "--learner", "svm", "--out", "z",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
