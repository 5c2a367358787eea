use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn gradda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradda")).args(args).output().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn nature_run_writes_a_manifest_entry() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradda(&["nature-run", "-c", smoke_config().to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(dir.path());
    let stages = m["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0]["stage"], "nature-run");
    assert!(dir.path().join("nature/nature.json").exists());
}

#[test]
fn downstream_stage_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradda(&["cycle", "-c", smoke_config().to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(smoke_config()).unwrap()).unwrap();
    cfg["obs"]["conv_density"] = serde_json::json!(1.5);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let out = gradda(&["nature-run", "-c", path.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("obs.conv_density"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(smoke_config()).unwrap()).unwrap();
    cfg["grid"]["depth"] = serde_json::json!(4);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let out = gradda(&["nature-run", "-c", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
}

#[test]
fn full_run_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = gradda(&["run", "-c", smoke_config().to_str().unwrap(), "-o", d.path().to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma["stages"].as_array().unwrap().len(), 8);
    assert_eq!(ma, mb);
    assert!(a.path().join("scorecard.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let out = gradda(&["gradcheck", "--seed", "3", "--cases", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed 3"));
}
