use std::path::Path;
use std::process::{Command, Output};

fn fusion(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusion"))
        .args(args)
        .current_dir(cwd)
        .env("FUSION_LOG", "error")
        .output()
        .expect("spawn fusion")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, extra: serde_json::Value) -> std::path::PathBuf {
    let mut cfg = serde_json::json!({
        "dataset": {"kind": "synthetic", "config": {"n_rct": 200, "n_obs": 800, "n_cont": 10, "n_cat": 2}},
        "methods": ["pd", "obs_only", "t_learner"],
        "seeds": [1],
        "train": {"iters": 30},
        "t_learner": {"iters": 30},
        "out": "ignored",
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gen_data_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(
        &["gen-data", "--seed", "2", "--dial", "1", "--out", "d.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    // header plus 1,000 randomized and 4,000 observational rows
    assert_eq!(csv.lines().count(), 5_001);
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.json")).unwrap()).unwrap();
    assert_eq!(side["summary"]["n_rct"], 1000);
    assert_eq!(side["record"]["config"]["overlap_dial"], 1.0);
    assert!(!stdout(&o).is_empty());
}

#[test]
fn gen_data_seed_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, name) in [("1", "a.csv"), ("2", "b.csv")] {
        assert!(fusion(&["gen-data", "--seed", seed, "--out", name], dir.path())
            .status
            .success());
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), serde_json::json!({"dials": [0.0, 1.0]}));
    let o = fusion(&["run", "--config", cfg.to_str().unwrap(), "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["metrics.csv", "summary.csv", "table.txt", "run.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
    assert!(stdout(&o).contains("t_learner"));
}

#[test]
fn run_restricts_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), serde_json::json!({"dials": [0.0, 1.0], "seeds": [1, 2]}));
    let o = fusion(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "out",
            "--seed",
            "2",
            "--dial",
            "1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
}

#[test]
fn diverging_cell_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        serde_json::json!({"overrides": {"pd": {"eta_primal": 1e6, "grad_clip": null}}}),
    );
    let o = fusion(&["run", "--config", cfg.to_str().unwrap(), "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/run.json")).unwrap()).unwrap();
    let failures = run["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert!(failures[0]["cell"].as_str().unwrap().starts_with("pd/"));
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), serde_json::json!({"dials": [1.5]}));
    let o = fusion(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn verify_theory_single_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(
        &["verify-theory", "--only", "penalty-conditioning", "--out", "v"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v/verdicts.json")).unwrap()).unwrap();
    let verdicts = report["verdicts"].as_array().unwrap();
    assert_eq!(verdicts.len(), 1);
    assert_eq!(verdicts[0]["name"], "penalty-conditioning");
    assert_eq!(verdicts[0]["passed"], true);
}

#[test]
fn minimax_verdict_documents_discrepancy() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(
        &["verify-theory", "--only", "minimax-toy", "--epsilon", "0.2"],
        dir.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("minimax-toy"), "{text}");
    assert!(text.contains("discrepancy documented"), "{text}");
}

#[test]
fn unknown_check_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(&["verify-theory", "--only", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lq_sweep_writes_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusion(
        &["sweep-alpha", "--lq", "--alphas", "0,0.5,1", "--out", "path.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("path.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
