use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 11
[data]
synth_train_per_class = 12
synth_test_per_class = 6
[victim]
epochs = 2
[attacks]
sources_train = 40
sources_test = 30
patch_train_images = 60
pgd_steps = 5
square_budget = 40
[attacks.patch]
iters = 5
batch_size = 8
[attribution.protocol]
max_epochs = 2
replicates = 2
"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attackprint"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("ATTACKPRINT_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("out/manifest.json")).unwrap()).unwrap()
}

fn hashes(m: &Value) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = m["stages"]
        .as_object()
        .unwrap()
        .values()
        .flat_map(|s| s["artifacts"].as_array().unwrap().clone())
        .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
        .collect();
    v.sort();
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let dir = setup();
    let o = cli(
        dir.path(),
        &[
            "--set",
            "data.source=\"idx\"",
            "--set",
            "data.train_images=\"/no/such/train-images.idx\"",
            "--set",
            "data.train_labels=\"/no/such/train-labels.idx\"",
            "--set",
            "data.test_images=\"/no/such/test-images.idx\"",
            "--set",
            "data.test_labels=\"/no/such/test-labels.idx\"",
            "train-victim",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("/no/such/train-images.idx"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_2() {
    let dir = setup();
    assert_eq!(cli(dir.path(), &["--preset", "huge", "train-victim"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["--set", "nonsense", "train-victim"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["verify"]).status.code(), Some(2));
}

#[test]
fn evaluate_without_a_model_exits_2() {
    let dir = setup();
    let o = cli(dir.path(), &["evaluate", "--method", "true-delta"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("train-attributor"), "{}", stderr(&o));
}

#[test]
fn end_to_end_run_is_reproducible_and_verifiable() {
    let a = setup();
    let o = cli(a.path(), &["run", "--method", "true-delta", "--method", "jpeg-q75"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("raw-image") && out.contains("absent"), "{out}");
    assert!(out.contains("ordering true-delta > jpeg-q75 > raw-image: n/a"), "{out}");

    let m = manifest(a.path());
    assert_eq!(m["stages"]["generate-v1"]["info"]["classes"], 17);
    assert_eq!(m["stages"]["train-attributor-v1-true-delta"]["info"]["best_val_accuracy"].as_array().unwrap().len(), 2);
    let fp = &m["stages"]["fingerprint-v1-jpeg-q75"]["info"];
    let gen = &m["stages"]["generate-v1"]["info"];
    assert_eq!(fp["train"].as_u64().unwrap() + fp["test"].as_u64().unwrap(), gen["records"].as_u64().unwrap());
    let summary: Value =
        serde_json::from_slice(&std::fs::read(a.path().join("out/eval/v1/true-delta/summary.json")).unwrap()).unwrap();
    assert!(summary["mean_accuracy"].is_number() && summary["std_accuracy"].is_number());

    let v = cli(a.path(), &["verify"]);
    assert!(v.status.success(), "{}", stderr(&v));

    let b = setup();
    assert!(cli(b.path(), &["run", "--method", "true-delta", "--method", "jpeg-q75"]).status.success());
    assert_eq!(hashes(&m), hashes(&manifest(b.path())));

    // expanded taxonomy extends the base pool
    let o = cli(a.path(), &["generate", "--expanded-eps"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(a.path());
    assert_eq!(m["stages"]["generate-v2"]["info"]["classes"], 21);
    let base: Vec<u64> = m["stages"]["generate-v1"]["info"]["train_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let expanded: Vec<u64> = m["stages"]["generate-v2"]["info"]["train_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(&expanded[..17], &base[..]);

    // a tampered artifact fails verification with the integrity code
    let victim = a.path().join("out/victim/victim.afck");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let v = cli(a.path(), &["verify"]);
    assert_eq!(v.status.code(), Some(3), "{}", stderr(&v));
}

#[test]
fn changed_configuration_refuses_an_existing_run() {
    let dir = setup();
    assert!(cli(dir.path(), &["train-victim"]).status.success());
    let o = cli(dir.path(), &["--set", "seed=12", "train-victim"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
