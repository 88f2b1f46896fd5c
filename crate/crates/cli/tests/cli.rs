use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
name = "cli-smoke"
trajectories = 40
seeds = [1]
estimators = ["pdis", "fqe"]
methods = ["rescale", "rilr"]
ablation_rollouts = 20

[env]
kind = "random-tabular"
num_states = 3
num_actions = 2
horizon = 4
discount = 0.9

[vlmh]
latent_dim = 2
hidden_size = 4
head_sizes = [8]
epochs = 2

[rilr]
hidden_size = 4
epochs = 2
"#;

fn opehf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_opehf")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = opehf(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(out.join("report.csv")).unwrap();
    let header = String::from_utf8_lossy(&first).lines().next().unwrap().to_string();
    assert_eq!(header, "estimator,method,policy_id,estimate,truth,seed");

    let o = opehf(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), first);

    let enc = dir.path().join("enc.csv");
    let o = opehf(&[
        "export-encodings",
        "--model",
        out.join("seed-1/vlmh.json").to_str().unwrap(),
        "--dataset",
        out.join("seed-1/dataset.jsonl").to_str().unwrap(),
        "--out",
        enc.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&enc).unwrap();
    // Header plus T + 1 rows per trajectory; 3 + L columns.
    assert_eq!(text.lines().count(), 1 + 40 * 5);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 3 + 2);
}

#[test]
fn seed_override_and_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("data");
    let o = opehf(&["gen-data", "--config", &cfg, "--seed", "4", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("seed-4/dataset.jsonl").exists());
    assert!(out.join("seed-5/dataset.jsonl").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace(r#"estimators = ["pdis", "fqe"]"#, "estimators = []"));
    let o = opehf(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let o = opehf(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn partial_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG
        .replace("horizon = 4", "horizon = 8")
        .replace("discount = 0.9", "discount = 0.01")
        .replace(r#"methods = ["rescale", "rilr"]"#, r#"methods = ["rescale", "oracle-ihr"]"#)
        .replace("ablation_rollouts = 20", "");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = opehf(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(std::fs::read_to_string(out.join("errors.jsonl")).unwrap().contains("rescale"));
}
