use std::path::Path;
use std::process::{Command, Output};

fn cdrfair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrfair"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "data": {
            "kind": "synthetic",
            "n_source_users": 60,
            "n_target_users": 60,
            "n_items": 50,
            "latent_dim": 4,
            "interactions_per_user": 10
        },
        "k_core": 2,
        "train": { "epochs": 2, "batch_size": 64, "dim": 8, "super_batch": 16 },
        "out_dir": dir.join("runs"),
        "seeds": [0]
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_mode_is_a_usage_error() {
    assert_eq!(cdrfair(&["train", "--mode", "vug"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = cdrfair(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reading config"));
}

#[test]
fn out_of_range_gamma_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(cdrfair(&["train", "--config", &cfg, "--gamma2", "1.5"]).status.code(), Some(2));
}

#[test]
fn synth_writes_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    let r = cdrfair(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["source.tsv", "target.tsv", "synth_spec.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let line = std::fs::read_to_string(out.join("target.tsv")).unwrap();
    assert_eq!(line.lines().next().unwrap().split('\t').count(), 3);
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let r = cdrfair(&["train", "--config", &cfg]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("cdr-vug") && stdout.contains("fairness"), "{stdout}");

    let run = dir.path().join("runs").join("seed-0").join("cdr-vug");
    let stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let e = cdrfair(&["eval", "--config", &cfg]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let again: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(stored["test"], again);
}

#[test]
fn infolab_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("info");
    let r = cdrfair(&["infolab", "--out", out.to_str().unwrap(), "--samples", "2000", "--sweep", "5"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let bias: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bias.json")).unwrap()).unwrap();
    let h = bias["overlapping"]["exact"]["h_target_given_source"].as_f64().unwrap();
    assert!((h - 0.680_077_045_728_279_8).abs() < 1e-12);
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 11);
}
