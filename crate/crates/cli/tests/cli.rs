use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cmaclip(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmaclip"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cmaclip(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, preset: &str, n: &str) {
    ok(&["synth", "--preset", preset, "--n", n, "--seed", "7", "--out", "d"], dir);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmaclip(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = cmaclip(&["train", "--data", "d", "--out", "r", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = cmaclip(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmaclip(&["eval", "--ckpt", "missing.cmac", "--data", "d"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cmac"));

    let out = cmaclip(&["synth", "--preset", "nope", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "two-task", "80");
    assert!(d.join("d/manifest.jsonl").is_file());
    assert!(d.join("d/tasks.json").is_file());

    ok(&["train", "--data", "d", "--preset", "toy", "--epochs", "1,1,1", "--out", "r"], d);
    for f in ["best.cmac", "model.cfg", "train_report.json", "run_log.jsonl"] {
        assert!(d.join("r").join(f).is_file(), "missing {f}");
    }
    let report = read_json(&d.join("r/train_report.json"));
    let stages: Vec<&str> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["warm_up", "end_to_end", "tuning"]);

    let log = std::fs::read_to_string(d.join("r/run_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // Three stages of one epoch, each logging two losses and two accuracies.
    assert_eq!(lines.len(), 12);
    for l in &lines {
        for k in ["timestamp", "stage", "epoch", "metric", "value"] {
            assert!(l.get(k).is_some(), "log line lacks {k}: {l}");
        }
    }

    let eval = ["eval", "--ckpt", "r/best.cmac", "--data", "d", "--precision", "0.9"];
    let a = ok(&eval, d);
    let b = ok(&eval, d);
    assert_eq!(a, b);
    let report: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 2);
    assert_eq!(report["n_examples"], 8);
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "two-task", "60");
    std::fs::write(
        d.join("run.cfg"),
        "# short run\nwarmup_epochs = 1\nend_to_end_epochs = 3\ntuning_epochs = 0\nmodel.d_hidden = 16\n",
    )
    .unwrap();
    ok(
        &["train", "--data", "d", "--config", "run.cfg", "--set", "end_to_end_epochs=1", "--out", "r"],
        d,
    );
    let report = read_json(&d.join("r/train_report.json"));
    let epochs: Vec<usize> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["epochs"].as_array().unwrap().len())
        .collect();
    assert_eq!(epochs, [1, 1]);
    let cfg = std::fs::read_to_string(d.join("r/model.cfg")).unwrap();
    assert!(cfg.contains("d_hidden = 16"));

    std::fs::write(d.join("bad.cfg"), "lr = 0.01\nwarmup = 2\n").unwrap();
    let out = cmaclip(&["train", "--data", "d", "--config", "bad.cfg", "--out", "r2"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2") && err.contains("unknown key"), "{err}");
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "two-task", "60");
    ok(
        &["ablate", "--data", "d", "--seeds", "1", "--epochs", "1,1,0", "--low-relevance", "beta", "--out", "a"],
        d,
    );
    let report = read_json(&d.join("a/ablation_report.json"));
    let variants: Vec<&str> = report["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["variant"].as_str().unwrap())
        .collect();
    assert_eq!(variants, ["full", "no_ma", "no_ma_no_sa"]);
    assert!(report["ordering_holds"].is_boolean());
    assert_eq!(report["seeds"], serde_json::json!([1]));
}

#[test]
fn visualize_pretrain_and_zeroshot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "aligned", "40");
    ok(&["train", "--data", "d", "--epochs", "0,1,0", "--out", "r"], d);
    let manifest = std::fs::read_to_string(d.join("d/manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    let token = first["text"].as_str().unwrap().split_whitespace().next().unwrap();

    ok(
        &["visualize", "--ckpt", "r/best.cmac", "--data", "d", "--id", id, "--token", token, "--out", "v"],
        d,
    );
    let csv = std::fs::read_to_string(d.join(format!("v/{id}_{token}.csv"))).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 4));
    assert!(rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    let pgm = std::fs::read(d.join(format!("v/{id}_{token}.pgm"))).unwrap();
    assert!(pgm.starts_with(b"P5"));

    let out = cmaclip(
        &["visualize", "--ckpt", "r/best.cmac", "--data", "d", "--id", id, "--token", "absent", "--out", "v"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(token));

    ok(&["pretrain", "--data", "d", "--epochs", "1", "--batch-size", "8", "--out", "p"], d);
    assert!(d.join("p/pretrained.cmac").is_file());
    ok(&["train", "--data", "d", "--init", "p/pretrained.cmac", "--epochs", "1,0,0", "--out", "r2"], d);
    let z: Value = serde_json::from_str(&ok(&["zeroshot", "--ckpt", "p/pretrained.cmac", "--data", "d", "--on", "all"], d)).unwrap();
    assert_eq!(z["n_examples"], 40);
    assert_eq!(z["chance"], 0.125);
    let acc = z["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
