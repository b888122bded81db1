use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pov(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pov"))
        .arg(args[0])
        .arg("--config")
        .arg(configs().join("smoke.toml"))
        .arg("--run-dir")
        .arg(run)
        .args(&args[1..])
        .env_remove("POV_RUN_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn err_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a record");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {text}"))
}

#[test]
fn third_to_ego_before_pretrain_is_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pov(dir.path(), &["evaluate", "--protocol", "third_to_ego"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(err_record(&out)["error"], "prerequisite");
}

#[test]
fn misspelled_override_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pov(dir.path(), &["generate-data", "--stage2.lamda", "0.0"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = err_record(&out);
    assert_eq!(rec["error"], "usage");
    assert_eq!(rec["key"], "stage2.lamda");
}

#[test]
fn reference_file_matches_defaults() {
    let cfg = pov_cli::parse_config(Some(&configs().join("reference.toml")), &[]).unwrap();
    assert_eq!(cfg, pov_core::pipeline::RunConfig::default());
}

#[test]
fn run_root_from_environment() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pov"))
        .args(["generate-data", "--run-name", "r1", "--config"])
        .arg(configs().join("smoke.toml"))
        .env("POV_RUN_ROOT", root.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(root.path().join("r1/data/manifest.jsonl").exists());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();

    let first = ok(&pov(run, &["generate-data"]));
    let again = ok(&pov(run, &["generate-data"]));
    assert_eq!(first["manifest"]["outputs"], again["manifest"]["outputs"]);

    // Changing an output-affecting key needs --force.
    let out = pov(run, &["generate-data", "--world.pixel_noise", "3"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pov(run, &["prompt-tune"]).status.code() == Some(3));

    let pre = ok(&pov(run, &["pretrain"]));
    assert_eq!(pre["stage"], "pretrain");
    ok(&pov(run, &["prompt-tune"]));
    ok(&pov(run, &["evaluate", "--protocol", "stage1_baseline"]));
    ok(&pov(run, &["evaluate", "--protocol", "third_to_ego"]));
    ok(&pov(run, &["evaluate", "--protocol", "hoi_xview_heldout"]));
    ok(&pov(run, &["ego-finetune", "--mode", "zero_shot"]));
    ok(&pov(run, &["ego-finetune", "--mode", "few_shot"]));

    let out = pov(run, &["evaluate", "--protocol", "third_to_ego"]);
    assert_eq!(out.status.code(), Some(4));

    for p in ["zero_shot_xview", "few_shot_xview"] {
        let r = ok(&pov(run, &["evaluate", "--protocol", p]));
        assert_eq!(r["report"]["protocol"], p);
        assert_eq!(r["report"]["samples"], 36);
    }
    for p in ["zero_shot_xview", "few_shot_xview", "third_to_ego", "hoi_xview_heldout", "stage1_baseline"] {
        assert!(run.join(format!("reports/{p}.json")).exists(), "{p}");
    }

    let f = ok(&pov(run, &["export-features", "--stage", "view_tune", "--split", "ego_test"]));
    let csv = std::fs::read_to_string(f["features"].as_str().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 37);
    assert!(run.join("config.json").exists());
    assert!(run.join("provenance/export-features.json").exists());
}
