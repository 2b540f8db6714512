use std::path::Path;
use std::process::Command;

fn kflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kflow"))
}

fn pipeline_toml() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/pipeline.toml")
}

#[test]
fn missing_config_fails_with_stage_tag() {
    let out = kflow().arg("run").env_remove("KFLOW_CONFIG").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: [config]"), "{err}");
}

#[test]
fn config_without_traces_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = kflow().args(["ingest", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("[config] inputs.traces: missing"), "{err}");
}

#[test]
fn mine_stops_after_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = kflow().arg("mine").arg("--config").arg(pipeline_toml()).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("mine/flows.json").is_file());
    assert!(!dir.path().join("ena").exists());
}

#[test]
fn simulate_then_render() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/scenario.toml");
    let out = kflow().arg("simulate").arg(&scenario).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["traces.jsonl", "annotations.csv", "truth.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let record = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay/shareflows/sf-forum-e02.json");
    let out = kflow().args(["shareflow", "render"]).arg(&record).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sf-forum-e02.html").is_file());
}
