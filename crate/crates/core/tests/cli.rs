use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hicmae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hicmae")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn param_count_reports_millions() {
    let dir = tempfile::tempdir().unwrap();
    let o = hicmae(&["param-count", "--model-size", "tiny", "--modalities", "av"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let millions: f64 = text.split('(').nth(1).and_then(|r| r.split(' ').next()).and_then(|v| v.parse().ok()).unwrap();
    assert!((millions - 20.0).abs() < 2.0, "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(hicmae(&["synth-data", "--out", "data", "--clips", "4", "--classes", "2"], p).status.success());

    let config_error = hicmae(&["pretrain", "--manifest", "data/manifest.csv", "--out", "x", "--lambda=-1"], p);
    assert_eq!(config_error.status.code(), Some(2));
    let usage_error = hicmae(&["pretrain", "--manifest", "data/manifest.csv", "--out", "x", "--bogus"], p);
    assert_eq!(usage_error.status.code(), Some(2));
    let missing_manifest = hicmae(&["pretrain", "--manifest", "nope.csv", "--out", "x"], p);
    assert_eq!(missing_manifest.status.code(), Some(3));

    fs::write(p.join("data/broken.hvid"), b"HVIDjunk").unwrap();
    let manifest = fs::read_to_string(p.join("data/manifest.csv")).unwrap();
    fs::write(p.join("data/manifest.csv"), manifest.replace("clip0000.hvid", "broken.hvid")).unwrap();
    let bad_data =
        hicmae(&["pretrain", "--manifest", "data/manifest.csv", "--out", "y", "--max-failures", "0", "--batch-size", "4"], p);
    assert_eq!(bad_data.status.code(), Some(3), "{}", String::from_utf8_lossy(&bad_data.stderr));

    let grad = hicmae(&["grad-check", "--per-tensor", "1", "--threshold", "0"], p);
    assert_eq!(grad.status.code(), Some(4));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(hicmae(&["synth-data", "--out", "data", "--clips", "4", "--classes", "2"], p).status.success());
    fs::write(p.join("run.cfg"), "# micro smoke run\nbatch_size = 4\nepochs = 5\nlambda = 0.01\nfusion-flow = audio-first\n").unwrap();
    let o = hicmae(&["pretrain", "--config", "run.cfg", "--manifest", "data/manifest.csv", "--out", "out", "--epochs", "1"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("out/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["batch_size"], 4);
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["model"]["lambda"], 0.01);
    assert_eq!(cfg["model"]["flow"], serde_json::to_value(hicmae::encoders::FusionFlow::AudioFirst).unwrap());
    // one epoch of 4 clips at batch 4
    assert_eq!(fs::read_to_string(p.join("out/loss.csv")).unwrap().lines().count(), 2);
}

#[test]
fn finetune_eval_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(hicmae(&["synth-data", "--out", "data", "--clips", "8", "--classes", "2"], p).status.success());
    let ft = hicmae(
        &["finetune", "--manifest", "data/manifest.csv", "--out", "ft", "--num-classes", "2", "--epochs", "1", "--batch-size", "4"],
        p,
    );
    assert!(ft.status.success(), "{}", String::from_utf8_lossy(&ft.stderr));
    assert!(stdout(&ft).contains("eval: uar="));

    let ev = hicmae(&["eval", "--checkpoint", "ft/finetune.hckp", "--manifest", "data/manifest.csv", "--out", "preds.csv"], p);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    assert_eq!(fs::read_to_string(p.join("preds.csv")).unwrap().lines().count(), 3);

    let fx = hicmae(
        &["extract-features", "--checkpoint", "ft/finetune.hckp", "--manifest", "data/manifest.csv", "--out", "f.csv"],
        p,
    );
    assert!(fx.status.success(), "{}", String::from_utf8_lossy(&fx.stderr));
    let text = fs::read_to_string(p.join("f.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 1 + 4 * 64);
}
