use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ckconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckconv")).args(args).env_remove("CKCONV_OUT").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn adding(out: &Path) -> String {
    format!(
        r#"{{ "seed": 3,
  "task": {{ "kind": "adding", "length": 10, "samples": 16, "test_samples": 8 }},
  "model": {{ "in_channels": 2, "out_channels": 1, "hidden": 4, "readout": "last_step",
             "kernel": {{ "field": {{ "kind": "sine_mlp", "omega0": 10.0 }}, "layers": 2, "hidden": 8 }} }},
  "train": {{ "steps": 3, "batch_size": 4 }},
  "outputs": {:?} }}"#,
        out.display().to_string()
    )
}

#[test]
fn run_writes_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &adding(&dir.path().join("cfg-out")));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = ckconv(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!dir.path().join("cfg-out").exists());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert!(a.join("summary.json").is_file());

    let c = dir.path().join("c");
    let o = ckconv(&["train", "--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "4", "--precision", "f32"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn env_var_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &adding(&dir.path().join("cfg-out")));
    let env_out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_ckconv"))
        .args(["run", "--config", &cfg])
        .env("CKCONV_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("metrics.csv").is_file());
}

#[test]
fn malformed_config_exits_2_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "task": {"kind": "adding", "length": -3}}"#);
    let o = ckconv(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("task.length"));
    let o = ckconv(&["run", "--config", "/nonexistent/x.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = adding(&dir.path().join("o")).replace("\"steps\": 3", "\"steps\": 3, \"optimizer\": { \"lr\": 1e300 }");
    let cfg = write_config(dir.path(), &body);
    let o = ckconv(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn fit_field_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let o = ckconv(&[
        "fit-field", "--target", "gaussian", "--field", "magnet", "--points", "33", "--steps", "5", "--lambda-alias",
        "0.1", "--mask", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let budget = fs::read_to_string(out.join("frequency_budget.csv")).unwrap();
    assert!(budget.starts_with("schema,block,layer,f_plus,f_nyq,violation"));
    assert_eq!(ckconv(&["fit-field", "--steps", "1"]).status.code(), Some(2));
}

#[test]
fn resolution_eval_and_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    let body = format!(
        r#"{{ "seed": 1,
  "task": {{ "kind": "resolution_shift", "length": 32, "samples": 8, "test_samples": 4 }},
  "model": {{ "in_channels": 1, "out_channels": 1, "hidden": 4,
             "kernel": {{ "field": {{ "kind": "sine_mlp", "omega0": 3.0 }}, "layers": 2, "hidden": 8 }} }},
  "train": {{ "steps": 2, "batch_size": 4 }},
  "resolution_factors": [1.0],
  "outputs": {:?} }}"#,
        out.display().to_string()
    );
    let cfg = write_config(dir.path(), &body);
    assert!(ckconv(&["run", "--config", &cfg]).status.success());
    let o = ckconv(&["eval-resolution", "--run", out.to_str().unwrap(), "--factor", "0.5", "--factor", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("resolution_eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(ckconv(&["eval-resolution", "--run", out.to_str().unwrap(), "--factor", "3"]).status.code(), Some(2));

    let o = ckconv(&["analyze-spectrum", "--count", "2", "--samples", "512"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("index,f_plus,dominant,tail_above_f_plus\n"));
    assert_eq!(text.lines().count(), 3);
}
