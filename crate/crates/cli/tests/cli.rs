use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mgno(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgno"))
        .args(args)
        .current_dir(cwd)
        .env("MGNO_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SPEC: &str = r#"{"coefficient": {"kind": "multiscale_trig"}, "d": 16, "seed": 7,
    "split": {"train": 8, "val": 2, "test": 2}}"#;

fn make_data(dir: &Path, name: &str, d: usize) {
    let spec = SPEC.replace(r#""d": 16"#, &format!(r#""d": {d}"#));
    fs::write(dir.join(format!("{name}.json")), spec).unwrap();
    let out = mgno(&["gen", "--spec", &format!("{name}.json"), "--n", "12", "--out", name], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_run(dir: &Path, data: &str, extra: &str) {
    let run = format!(
        r#"{{"schema": "mgno-run/1", "dataset": {{"path": "{data}", "validate_on": "train"}},
        "model": {{"layers": 2, "width": 4, "levels": 2, "pre": 1}},
        "train": {{"epochs": 2, "batch_size": 4{extra}}}}}"#
    );
    fs::write(dir.join("run.json"), run).unwrap();
}

#[test]
fn solve_poisson_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let out = mgno(&["solve-poisson", "--size", "64", "--out", "sp.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("sp.json"));
    let rho = v["rho"].as_f64().unwrap();
    assert!((0.05..=0.2).contains(&rho), "rho {rho}");
    assert_eq!(v["interior"], 63);
}

#[test]
fn solve_poisson_rejects_indivisible_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = mgno(&["solve-poisson", "--size", "63"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple"));
}

#[test]
fn solve_poisson_single_iteration_is_low_confidence() {
    let dir = tempfile::tempdir().unwrap();
    // One ratio is dominated by the rough initial error, so the range
    // check may fail; the report is written either way and flagged.
    mgno(&["solve-poisson", "--size", "32", "--iters", "1", "--out", "sp.json"], dir.path());
    assert_eq!(json(&dir.path().join("sp.json"))["report"]["low_confidence"], true);
}

#[test]
fn gen_is_reproducible_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    let a = mgno(&["gen", "--spec", "spec.json", "--n", "12", "--out", "a"], dir.path());
    let b = mgno(&["gen", "--spec", "spec.json", "--n", "12", "--out", "b"], dir.path());
    assert_eq!(code(&a), 0);
    let sha = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| l.starts_with("sha256"))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(sha(&a).len(), 3);
    assert_eq!(sha(&a), sha(&b));
    let c = mgno(&["gen", "--spec", "spec.json", "--n", "12", "--out", "c", "--seed", "8"], dir.path());
    assert_ne!(sha(&a), sha(&c));

    fs::write(dir.path().join("bad.json"), r#"{"coefficient": {"kind": "bogus"}, "d": 16}"#).unwrap();
    let bad = mgno(&["gen", "--spec", "bad.json", "--n", "2", "--out", "x"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("coefficient.kind"));
}

#[test]
fn train_eval_superres_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    make_data(p, "d16", 16);
    write_run(p, "d16", "");
    let out = mgno(&["train", "--config", "run.json", "--out", "run"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["history.csv", "history.json", "timing.json", "run.json", "metrics.json", "checkpoint/config.json"] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }

    // Evaluating the training split reproduces the last validation score.
    let out = mgno(&["eval", "--ckpt", "run/checkpoint", "--data", "d16", "--out", "ev.json", "--split", "train"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let history = json(&p.join("run/history.json"));
    let last = history.as_array().unwrap().last().unwrap()["val_l2"].as_f64().unwrap();
    let ev = json(&p.join("ev.json"))["metrics"]["mean_l2"].as_f64().unwrap();
    assert!((ev - last).abs() < 1e-10, "{ev} vs {last}");

    // Zero extra levels is plain evaluation.
    let out = mgno(
        &[
            "superres",
            "--ckpt",
            "run/checkpoint",
            "--data-hi",
            "d16",
            "--extra-levels",
            "0",
            "--out",
            "sr.json",
            "--split",
            "train",
        ],
        p,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(json(&p.join("sr.json"))["metrics"]["mean_l2"].as_f64().unwrap(), ev);

    make_data(p, "d32", 32);
    let out = mgno(&["eval", "--ckpt", "run/checkpoint", "--data", "d32", "--out", "e32.json"], p);
    assert_eq!(code(&out), 2, "eval at the wrong resolution is a shape error");
    let out = mgno(
        &["superres", "--ckpt", "run/checkpoint", "--data-hi", "d32", "--extra-levels", "1", "--out", "s32.json"],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(json(&p.join("s32.json"))["metrics"]["mean_l2"].as_f64().unwrap().is_finite());
    let out = mgno(
        &["superres", "--ckpt", "run/checkpoint", "--data-hi", "d32", "--extra-levels", "2", "--out", "s.json"],
        p,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn loss_override_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    make_data(p, "d16", 16);
    write_run(p, "d16", "");
    for loss in ["l2", "h1"] {
        let out = mgno(&["train", "--config", "run.json", "--out", loss, "--loss", loss], p);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let l2 = fs::read_to_string(p.join("l2/history.json")).unwrap();
    let h1 = fs::read_to_string(p.join("h1/history.json")).unwrap();
    assert_ne!(l2, h1);
    let rerun = mgno(&["train", "--config", "run.json", "--out", "again", "--loss", "l2"], p);
    assert_eq!(code(&rerun), 0);
    assert_eq!(l2, fs::read_to_string(p.join("again/history.json")).unwrap());
}

#[test]
fn bad_run_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    make_data(p, "d16", 16);
    write_run(p, "d16", r#", "momentum": 0.9"#);
    let out = mgno(&["train", "--config", "run.json", "--out", "run"], p);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = mgno(&["gradcheck", "--out", "gc.json"], p);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert_eq!(json(&p.join("gc.json"))["passed"], true);
    assert_eq!(code(&mgno(&["gradcheck", "--loss", "l2"], p)), 0);
    assert_eq!(code(&mgno(&["gradcheck", "--inject-fault", "gelu-sign"], p)), 1);
    assert_eq!(code(&mgno(&["gradcheck", "--size", "32"], p)), 2);
}
