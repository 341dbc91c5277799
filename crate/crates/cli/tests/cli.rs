use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = r#"
name = "tiny"
lambda = 2.0

[system]
kind = "single_integrator"
state_dim = 2
dt = 0.1
horizon = 3

[source]
kind = "gaussian"
mean = [0.0, 0.0]
diag = [1.0, 1.0]

[target]
kind = "gaussian"
mean = [1.0, 0.0]
diag = [0.5, 0.5]

[policy]
widths = [2, 8, 2]
alpha = 0.5

[train]
batch_size = 32
steps = 20
eval_every = 10
eval_samples = 64

[eval]
samples = 64

[benchmark]
starts = 2
iterations = 200
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowsteer"))
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn presets_validate() {
    for i in 1..=4 {
        let out = bin()
            .args(["validate", "--config"])
            .arg(presets().join(format!("example{i}.cfg")))
            .output()
            .unwrap();
        assert!(out.status.success(), "example{i}: {}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("budget ok"));
    }
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("alpha = 0.5", "alpha = 1.5"));
    let out = bin().args(["validate", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), &TINY.replace("lambda = 2.0", "lambda = 2.0\nlamda = 1.0"));
    let out = bin().args(["validate", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lamda"), "{}", stderr(&out));
}

#[test]
fn benchmark_rejects_nonlinear_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["benchmark", "-c"])
        .arg(presets().join("example4.cfg"))
        .arg("-o")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nonlinear"), "{}", stderr(&out));
}

#[test]
fn emit_figures_without_a_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("emit-figures").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &TINY.replace("steps = 20", "steps = 20\nlearning_rate = 1e300"),
    );
    let out = bin()
        .args(["run", "-c"])
        .arg(&cfg)
        .arg("-o")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn run_writes_hashed_artifacts_and_figures_regenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "-c"])
        .arg(&cfg)
        .args(["--steps", "10", "--seed", "3"])
        .env("FLOWSTEER_OUT", &run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("benchmark cost"), "{stdout}");

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    for want in [
        "config.toml",
        "policy.ckpt",
        "convergence.csv",
        "metrics.csv",
        "trajectories.csv",
        "benchmark.csv",
        "benchmark.dat-s",
        "figures/convergence.svg",
        "figures/snapshot_k000.svg",
        "figures/snapshot_k003.svg",
    ] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(!names.contains(&"timing.json"));
    assert!(run_dir.join("timing.json").exists());
    assert!(!run_dir.join(".flowsteer.lock").exists());
    for f in files {
        let bytes = fs::read(run_dir.join(f["path"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(f["sha256"].as_str().unwrap(), hex);
    }
    let config = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(config.contains("steps = 10") && config.contains("seed = 3"), "{config}");

    let before = fs::read(run_dir.join("figures/convergence.svg")).unwrap();
    fs::remove_dir_all(run_dir.join("figures")).unwrap();
    let out = bin().arg("emit-figures").arg(&run_dir).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(run_dir.join("figures/convergence.svg")).unwrap(), before);
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run_dir = dir.path().join("out");
    fs::create_dir_all(&run_dir).unwrap();
    fs::write(run_dir.join(".flowsteer.lock"), "1\n").unwrap();
    let out = bin()
        .args(["run", "-c"])
        .arg(&cfg)
        .arg("-o")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("in use"), "{}", stderr(&out));
}
