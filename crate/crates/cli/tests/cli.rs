use std::path::Path;
use std::process::{Command, Output};

fn mtcvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtcvr")).args(args).env("RUST_LOG", "error").output().expect("spawn mtcvr")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{"data":{"synthetic":{"num_users":100,"num_items":60,"num_combos":30,"num_records":4000,"target_cvr":0.2,"target_ctr":0.2}},"epochs":1,"gauc":false}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error record on stderr");
    serde_json::from_str(line).expect("stderr ends with a JSON record")
}

#[test]
fn generate_then_train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let gen = dir.path().join("gen");
    let out = mtcvr(&["generate", "--config", &cfg, "--out", gen.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["dataset.csv", "ground_truth.csv", "generator.json"] {
        assert!(gen.join(f).exists(), "{f}");
    }

    let tr = dir.path().join("train");
    let out = mtcvr(&["train", "--config", &cfg, "--out", tr.to_str().unwrap(), "--estimator", "multi_ipw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = tr.join("multi_ipw_seed0.ckpt");
    assert!(ckpt.exists());
    assert!(tr.join("multi_ipw_seed0_trace.csv").exists());

    let report = dir.path().join("report.json");
    let out = mtcvr(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        gen.join("dataset.csv").to_str().unwrap(),
        "--ground-truth",
        gen.join("ground_truth.csv").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let auc = v["cvr_auc_do"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn compare_writes_summary_for_each_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("cmp");
    let out = mtcvr(&[
        "compare",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--estimator",
        "base,multi_ipw",
        "--repeats",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("base,2,"));
    assert!(rows[2].starts_with("multi_ipw,2,"));
    assert_eq!(std::fs::read_to_string(out_dir.join("runs.csv")).unwrap().lines().count(), 5);
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("sw");
    let out = mtcvr(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--estimator",
        "multi_ipw",
        "--param",
        "tau",
        "--grid",
        "0.01,0.1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep_tau.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bias_audit_on_a_supplied_instance() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.json");
    std::fs::write(
        &inst,
        r#"{"p":[0.2,0.7,0.5],"r":[true,false,true],"r_hat":[0.6,0.3,0.8],"p_hat":[0.2,0.7,0.5],"e_hat":[0.1,0.2,0.3]}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("ba");
    let out = mtcvr(&[
        "bias-audit",
        "--instance",
        inst.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--draws",
        "500",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("bias_audit.json")).unwrap()).unwrap();
    let ipw = reports.as_array().unwrap().iter().find(|r| r["estimator"] == "multi_ipw").unwrap();
    assert!(ipw["bias"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn verify_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtcvr(&["verify", "--out", dir.path().to_str().unwrap(), "--instances", "5", "--max-size", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("theorems.csv").exists());
}

#[test]
fn unknown_config_keys_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochs":1,"hyper":{"multi_ipw":{"lambda":2.0}},"typo_field":1}"#).unwrap();
    let out = mtcvr(&["compare", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_json(&out);
    assert_eq!(rec["error"], "unknown_keys");
    let keys: Vec<&str> = rec["keys"].as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    assert!(keys.contains(&"typo_field"));
    assert!(keys.iter().any(|k| k.starts_with("hyper.multi_ipw.lambda")));
}

#[test]
fn unknown_estimator_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtcvr(&["train", "--out", dir.path().to_str().unwrap(), "--estimator", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}
