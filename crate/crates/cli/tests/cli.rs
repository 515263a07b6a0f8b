use std::path::Path;
use std::process::{Command, Output};

use tenet_core::Checkpoint;

fn tenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tenet"))
        .args(args)
        .output()
        .expect("spawn tenet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 4] = ["--k", "2", "--m", "1"];

fn gen(dir: &Path) {
    let mut args = vec!["gen", "--out", s(dir)];
    args.extend(SMALL);
    let o = tenet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(out: &Path, data: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", s(out), "--data", s(data), "--steps", steps];
    args.extend(SMALL);
    args.extend(extra);
    tenet(&args)
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(root);
    let data = root.join("data");
    assert!(data.join("manifest.json").exists());

    let o = train(root, &data, "20", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model.ckpt", "loss.csv", "config.json"] {
        assert!(root.join(f).exists(), "{f} missing");
    }

    let ev = root.join("ev");
    let o = tenet(&[
        "eval", "--checkpoint", s(&root.join("model.ckpt")), "--rollouts", "2", "--seeds", "2", "--out", s(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["n_rollouts"], 2);
    assert!(std::fs::read_to_string(ev.join("eval.csv")).unwrap().starts_with("split,task_id"));

    let ctl = root.join("p.ctl");
    let o = tenet(&[
        "instantiate", "--checkpoint", s(&root.join("model.ckpt")), "--description", "go to the left wall",
        "--out", s(&ctl),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("4610 parameters"));

    let bench = root.join("bench.json");
    let o = tenet(&["bench", "--controller", s(&ctl), "--iterations", "10000", "--out", s(&bench)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(b["param_count"], 4610);
    assert_eq!(b["forward"]["iterations"], 10000);
    assert!(b["hz"].as_f64().unwrap() > 0.0);

    let o = tenet(&["eval", "--controller", s(&ctl), "--rollouts", "1", "--seeds", "1", "--out", s(&root.join("ev2"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn artifacts_are_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let mut args = vec!["gen", "--out", s(tmp.path())];
    args.extend(SMALL);
    let o = tenet(&args);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    args.push("--force");
    assert_eq!(code(&tenet(&args)), 0);
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    let o = tenet(&["train", "--out", s(&out), "--steps", "5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--data"));

    let o = train(&out, &tmp.path().join("nowhere"), "5", &[]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("tenet gen"));

    let o = tenet(&["eval", "--controller", s(&tmp.path().join("x.ctl"))]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("tenet instantiate"));

    let o = tenet(&["eval", "--checkpoint", s(&tmp.path().join("x.ckpt"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn invalid_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "trian": {}}"#).unwrap();
    let o = tenet(&["gen", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("trian"));

    let o = tenet(&["experiment", "scaling", "--sizes", "50,25", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);

    gen(tmp.path());
    let o = tenet(&["train", "--out", s(tmp.path()), "--data", s(&tmp.path().join("data")), "--k", "3", "--m", "1"]);
    assert_eq!(code(&o), 2, "dataset hash mismatch should be rejected");
}

#[test]
fn bench_rejects_short_runs() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    assert_eq!(code(&train(tmp.path(), &tmp.path().join("data"), "2", &[])), 0);
    let o = tenet(&[
        "bench", "--checkpoint", s(&tmp.path().join("model.ckpt")), "--description", "reach", "--iterations", "50",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3_with_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let o = train(tmp.path(), &tmp.path().join("data"), "50", &["--lr", "1e300"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let ck = Checkpoint::load(&tmp.path().join("last_good.ckpt")).unwrap();
    assert!(ck.blocks.iter().all(|b| b.params.values().iter().all(|v| v.is_finite())));
    assert!(!tmp.path().join("model.ckpt").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path());
    let data = tmp.path().join("data");
    let full = tmp.path().join("full");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    assert_eq!(code(&train(&full, &data, "12", &[])), 0);
    assert_eq!(code(&train(&half, &data, "6", &[])), 0);
    let o = train(&rest, &data, "12", &["--resume", s(&half.join("model.ckpt"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = Checkpoint::load(&full.join("model.ckpt")).unwrap();
    let b = Checkpoint::load(&rest.join("model.ckpt")).unwrap();
    assert_eq!(a.steps, 12);
    assert_eq!(b.steps, 12);
    for (x, y) in a.blocks.iter().zip(&b.blocks) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.params.values(), y.params.values());
    }
}
