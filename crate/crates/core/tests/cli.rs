//! End-to-end runs of the `forgetlab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn forgetlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgetlab"))
        .args(args)
        .env_remove("FORGETLAB_SEED")
        .env_remove("FORGETLAB_OUTPUT_DIR")
        .output()
        .expect("spawn forgetlab")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, format!("schema = \"forgetlab.scenario/1\"\n{body}")).unwrap();
    path.to_str().unwrap().to_string()
}

const FLOW: &str = r#"
kind = "flow"
output_dir = "out"

[geometry]
dim = 1
mu_old = [0.0]
mu_new = [4.0]

[params]
beta = 0.9
dt = 0.1
t_max = 40.0
"#;

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

#[test]
fn flow_beta_column_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "flow.toml", FLOW);
    let out = forgetlab(&["run", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/flow.csv")).unwrap();
    let beta = column(&csv, "beta");
    assert!(beta.len() > 100);
    assert!(beta.windows(2).all(|w| w[1] < w[0]));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/flow.json")).unwrap()).unwrap();
    assert_eq!(summary["beta_strictly_decreasing"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
kind = "replay"
output_dir = "out"

[geometry]
dim = 2
mu_old = [0.0, 0.0]
mu_new = [3.0, 0.0]

[params]
lambda = 0.2
trials = 20000
weight_probes = 20000

[estimator]
seed = 99
"#;
    let cfg = write_config(dir.path(), "replay.toml", body);
    let read = || {
        let out = forgetlab(&["run", &cfg]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            fs::read(dir.path().join("out/replay.csv")).unwrap(),
            fs::read(dir.path().join("out/replay.json")).unwrap(),
        )
    };
    let first = read();
    assert_eq!(first, read());
    let out = forgetlab(&["--seed", "100", "run", &cfg]);
    assert!(out.status.success());
    assert_ne!(first.1, fs::read(dir.path().join("out/replay.json")).unwrap());
}

#[test]
fn invalid_probability_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &FLOW.replace("beta = 0.9", "beta = 1.5"));
    let out = forgetlab(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("params.beta"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_kind_and_field_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "kind.toml",
        &FLOW.replace("kind = \"flow\"", "kind = \"annealing\""),
    );
    let out = forgetlab(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind"));

    let cfg = write_config(
        dir.path(),
        "field.toml",
        &FLOW.replace("dt = 0.1", "dt = 0.1\nstep = 3"),
    );
    let out = forgetlab(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params"));
}

#[test]
fn missing_config_and_unwritable_output_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = forgetlab(&["run", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let cfg = write_config(dir.path(), "flow.toml", FLOW);
    let out = forgetlab(&["--output-dir", blocker.join("sub").to_str().unwrap(), "run", &cfg]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_suite_and_mutation_are_input_errors() {
    assert_eq!(forgetlab(&["check", "everything"]).status.code(), Some(2));
    assert_eq!(
        forgetlab(&["check", "core", "--mutate", "nothing"]).status.code(),
        Some(2)
    );
}

#[test]
fn version_prints_package_version() {
    let out = forgetlab(&["version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}
