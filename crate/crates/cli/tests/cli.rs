use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const JOB: &str = r#"
version = 1

[arch]
widths = [4, 8]

[task]
image_size = [16, 16]
n_train = 8
n_val = 4
n_test = 4
seed = 3

[train]
epochs = 1
batch_size = 4
"#;

fn acnorm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acnorm"))
        .args(args)
        .current_dir(dir)
        .env_remove("ACNORM_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn acnorm")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pretrained(dir: &Path) {
    fs::write(dir.join("job.toml"), JOB).unwrap();
    ok(acnorm(&["pretrain", "--config", "job.toml", "--out", "zoo/a.ckpt", "--metrics", "pre.json"], dir));
}

#[test]
fn pretrain_finetune_and_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pretrained(d);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("pre.json")).unwrap()).unwrap();
    assert!(metrics["dice"].as_f64().is_some());

    ok(acnorm(&["finetune", "--ckpt", "zoo/a.ckpt", "--config", "job.toml", "--out", "ft.ckpt", "--metrics", "ft.json"], d));
    ok(acnorm(&["probe", "deltas", "--before", "zoo/a.ckpt", "--after", "ft.ckpt", "--out", "deltas.csv"], d));
    let csv = fs::read_to_string(d.join("deltas.csv")).unwrap();
    // widths [4, 8] plus decoder: one row per norm and per conv layer
    assert!(csv.lines().count() > 1);
    assert!(csv.lines().next().unwrap().contains("affine_delta"));
}

#[test]
fn surgery_writes_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pretrained(d);
    let shuffled = ok(acnorm(&["surgery", "shuffle", "--ckpt", "zoo/a.ckpt", "--seed", "1"], d));
    assert!(shuffled.trim().ends_with("a_shuffled.ckpt"));
    ok(acnorm(&["surgery", "mask", "--ckpt", "zoo/a.ckpt", "--ratio", "0.5", "--seed", "1", "--out", "m.ckpt"], d));
    ok(acnorm(&["probe", "deltas", "--before", "zoo/a.ckpt", "--after", "m.ckpt", "--out", "md.csv"], d));

    let bad = acnorm(&["surgery", "mask", "--ckpt", "zoo/a.ckpt", "--ratio", "1.5", "--seed", "1"], d);
    assert!(!bad.status.success());
    let missing = acnorm(&["surgery", "shuffle", "--ckpt", "nope.ckpt", "--seed", "1"], d);
    assert!(!missing.status.success());
}

#[test]
fn estimate_then_rank() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pretrained(d);
    ok(acnorm(&["surgery", "shuffle", "--ckpt", "zoo/a.ckpt", "--seed", "2", "--out", "zoo/b.ckpt"], d));
    ok(acnorm(&["estimate", "--ckpt-dir", "zoo", "--task", "job.toml", "--out", "scores.json"], d));
    let scores: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("scores.json")).unwrap()).unwrap();
    let ids: Vec<&str> = scores["scores"].as_array().unwrap().iter().map(|s| s["checkpoint_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b"]);

    fs::write(
        d.join("results.json"),
        r#"{"results": [{"checkpoint_id": "a", "metric": 0.8}, {"checkpoint_id": "b", "metric": 0.6}]}"#,
    )
    .unwrap();
    let stdout = ok(acnorm(&["rank", "--scores", "scores.json", "--truth", "results.json", "--out", "report.json"], d));
    assert!(stdout.contains("kendall_tau"));
    assert!(d.join("report.json").exists());

    fs::write(d.join("partial.json"), r#"{"results": [{"checkpoint_id": "a", "metric": 0.8}]}"#).unwrap();
    assert!(!acnorm(&["rank", "--scores", "scores.json", "--truth", "partial.json", "--out", "r.json"], d).status.success());
}

#[test]
fn propagation_probe_respects_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("eq5.toml"), "draws = 3\nn_samples = 200000\nseed = 4\n").unwrap();
    let stdout = ok(acnorm(&["probe", "eq5", "--config", "eq5.toml", "--out", "eq5.json"], d));
    assert_eq!(stdout.lines().count(), 1 + 3 + 1);
    assert!(!acnorm(&["probe", "eq5", "--config", "eq5.toml", "--tolerance", "0"], d).status.success());
    fs::write(d.join("bad.toml"), "draws = 3\nunknown = 1\n").unwrap();
    assert!(!acnorm(&["probe", "eq5", "--config", "bad.toml"], d).status.success());
}

const EXPERIMENT: &str = r#"
version = 1
name = "tiny"
seed = 5
n_seeds = 1
arms = ["vanilla_bn", "acnorm"]
checkpoint_ops = ["original"]
probe_epochs = [1]

[arch]
widths = [4, 8]

[source]
image_size = [16, 16]
n_train = 8
n_val = 4
n_test = 4

[target]
image_size = [16, 16]
n_train = 8
n_val = 4
n_test = 4
seed = 11

[pretrain]
epochs = 1
batch_size = 4

[finetune]
epochs = 1
batch_size = 4
"#;

#[test]
fn experiment_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), EXPERIMENT).unwrap();
    ok(acnorm(&["experiment", "--config", "exp.toml", "--out", "run1"], d));
    ok(acnorm(&["experiment", "--config", "run1/run_manifest.json", "--out", "run2"], d));
    let a = fs::read_to_string(d.join("run1/results.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("run2/results.csv")).unwrap());
    assert_eq!(a.lines().count(), 1 + 2);
    assert!(a.lines().skip(1).all(|l| l.starts_with("5,")));
    assert!(d.join("run1/deltas.svg").exists());

    let seeded = Command::new(env!("CARGO_BIN_EXE_acnorm"))
        .args(["experiment", "--config", "exp.toml", "--out", "run3"])
        .current_dir(d)
        .env("ACNORM_SEED", "9")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(seeded);
    let c = fs::read_to_string(d.join("run3/results.csv")).unwrap();
    assert!(c.lines().skip(1).all(|l| l.starts_with("9,")));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("job.toml"), "version = 2\n").unwrap();
    let out = acnorm(&["pretrain", "--config", "job.toml", "--out", "x.ckpt"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    acnorm_core::JobConfig::load(&root.join("job.toml")).unwrap();
    acnorm_core::probe::StatPropagationConfig::load(&root.join("propagation.toml")).unwrap();
    let misalignment = acnorm_core::ExperimentConfig::load(&root.join("misalignment.toml")).unwrap();
    assert_eq!(misalignment.checkpoint_ops.len(), 3);
    let zoo = acnorm_core::ExperimentConfig::load(&root.join("zoo.toml")).unwrap();
    let members = zoo.zoo.unwrap().members;
    assert_eq!(members.len(), 4);
    assert!(members[3].source.is_none());
}
