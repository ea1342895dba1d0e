use std::path::Path;
use std::process::{Command, Output};

use linmir_core::probe::read_embeddings;

fn linmir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linmir"))
        .args(args)
        .env_remove("LINMIR_OUT_DIR")
        .output()
        .expect("spawn linmir")
}

fn linmir_env(args: &[&str], key: &str, val: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linmir"))
        .args(args)
        .env(key, val)
        .output()
        .expect("spawn linmir")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn census_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    let a = linmir(&["census", "--preset", "large", "--out-dir", out]);
    let b = linmir(&["census", "--preset", "large", "--out-dir", out]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("total"));
}

#[test]
fn census_json_is_parseable() {
    let dir = tempfile::tempdir().unwrap();
    let o = linmir(&["census", "--format", "json", "--dim", "64", "--heads", "4", "--out-dir", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.is_object());
}

#[test]
fn usage_errors_exit_two() {
    let o = linmir(&["census", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = linmir(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_line_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = linmir(&["probe", "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("linmir: error["), "{err}");

    let missing = dir.path().join("nope.ckpt");
    let o = linmir(&["probe", "--checkpoint", path(&missing), "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn bad_config_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = linmir(&["census", "--config", path(&cfg), "--out-dir", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn precedence_flag_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let (file_dir, env_dir, flag_dir) = (dir.path().join("file"), dir.path().join("env"), dir.path().join("flag"));
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        format!("seed = 5\nout_dir = {:?}\n\n[census]\npreset = \"large\"\n", path(&file_dir)),
    )
    .unwrap();
    let snap = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(d.join("resolved_config.json")).unwrap()).unwrap()
    };

    assert!(linmir(&["census", "--config", path(&cfg)]).status.success());
    let s = snap(&file_dir);
    assert_eq!(s["seed"], 5);
    assert_eq!(s["census"]["preset"], "large");

    assert!(linmir_env(&["census", "--config", path(&cfg)], "LINMIR_OUT_DIR", &env_dir).status.success());
    assert!(env_dir.join("resolved_config.json").exists());

    let o = linmir_env(
        &["census", "--config", path(&cfg), "--out-dir", path(&flag_dir), "--seed", "9", "--preset", "small"],
        "LINMIR_OUT_DIR",
        &env_dir,
    );
    assert!(o.status.success());
    let s = snap(&flag_dir);
    assert_eq!(s["seed"], 9);
    assert_eq!(s["census"]["preset"], "small");
}

#[test]
fn snapshot_can_be_fed_back() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = linmir(&["census", "--preset", "large", "--branch", "summary_mixing", "--out-dir", path(&a)]);
    assert!(first.status.success());
    let again = linmir(&["census", "--config", path(&a.join("resolved_config.json")), "--out-dir", path(&b)]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(first.stdout, again.stdout);
}

#[test]
fn tokenize_synthetic_clips() {
    let dir = tempfile::tempdir().unwrap();
    let o = linmir(&["tokenize", "--synthetic", "3", "--codebook-size", "64", "--out-dir", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("tokens.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let toks = l["tokens"].as_array().unwrap();
        assert!(!toks.is_empty());
        assert!(toks.iter().all(|t| t.as_u64().unwrap() < 64));
    }
}

#[test]
fn pretrain_then_probe_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = linmir(&[
        "pretrain", "--synthetic", "8", "--steps", "4", "--batch-size", "2", "--checkpoint-every", "2", "-q",
        "--out-dir", path(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("trained 4 steps"));
    for f in ["metrics.csv", "final.ckpt", "step-000002.ckpt", "resolved_config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ck = run.join("final.ckpt");

    let probe_dir = dir.path().join("probe");
    let o = linmir(&[
        "probe", "--checkpoint", path(&ck), "--task", "pitch_class", "--size", "60", "--epochs", "3", "--control",
        "-q", "--out-dir", path(&probe_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(probe_dir.join("probe_report.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    let acc = reports[0]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let emb = dir.path().join("emb.bin");
    let o = linmir(&[
        "export-embeddings", "--checkpoint", path(&ck), "--size", "50", "--out", path(&emb), "-q", "--out-dir",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_embeddings(&emb).unwrap();
    assert_eq!(m.nrows(), 50);
    assert!(m.iter().all(|v| v.is_finite()));
    let names = std::fs::read_to_string(dir.path().join("emb.clips.txt")).unwrap();
    assert_eq!(names.lines().count(), 50);
}

#[test]
fn quick_bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = linmir(&[
        "bench", "--dim", "32", "--heads", "2", "--lengths", "16,32,64", "--format", "json", "-q", "--out-dir",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("summary_mixing: log-log slope"));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench_scaling.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);

    let o = linmir(&["bench", "--mode", "size", "--format", "csv", "-q", "--out-dir", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("branchformer"));
    assert!(dir.path().join("bench_size.csv").exists());
}
