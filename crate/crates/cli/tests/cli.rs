use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/locomo_mini.json")
}

fn run(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evomem"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, config: Option<&Path>, args: &[&str]) -> String {
    let o = run(out, config, args);
    assert!(
        o.status.success(),
        "evomem {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ingest(out: &Path, dataset: &Path) {
    let d = dataset.to_str().unwrap();
    ok(out, None, &["ingest", "--dataset", d, "--format", "locomo"]);
}

#[test]
fn evolve_writes_stores_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ingest(out, &fixture());
    ok(out, None, &["extract"]);
    ok(out, None, &["evolve"]);
    assert!(out.join("stores/conv-a").is_dir());
    assert!(out.join("batches/conv-a.jsonl").is_file());
    let manifest: Value =
        serde_json::from_slice(&fs::read(out.join("manifests/evolve.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"]["name"], "evolve");
    assert!(manifest["inputs"].as_object().unwrap().contains_key("corpus.jsonl"));
    assert!(!manifest["artifacts"].as_object().unwrap().is_empty());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), None, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_corpus_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), None, &["extract"]);
    assert_eq!(o.status.code(), Some(12));
    assert!(String::from_utf8_lossy(&o.stderr).contains("evomem ingest"));
}

#[test]
fn pro_profile_retrieves_ten() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ingest(out, &fixture());
    ok(out, None, &["extract"]);
    ok(out, None, &["evolve"]);
    ok(out, None, &["index"]);
    ok(
        out,
        None,
        &["query", "--pair", "conv-a", "--question", "Where did Nadia travel?", "--profile", "pro"],
    );
    let q: Value = serde_json::from_slice(&fs::read(out.join("query.json")).unwrap()).unwrap();
    assert_eq!(q["retrieved"].as_array().unwrap().len(), 10);
    assert_eq!(q["profile"], "pro");
}

/// The fixture with the first two sessions of conv-a swapped in time.
fn out_of_order_fixture(dir: &Path) -> PathBuf {
    let mut v: Value = serde_json::from_slice(&fs::read(fixture()).unwrap()).unwrap();
    let conv = &mut v[0]["conversation"];
    let first = conv["session_1_date_time"].clone();
    conv["session_1_date_time"] = conv["session_2_date_time"].clone();
    conv["session_2_date_time"] = first;
    let path = dir.join("swapped.json");
    fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    path
}

#[test]
fn out_of_order_sessions_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = out_of_order_fixture(dir.path());
    let out = dir.path().join("ws");
    ingest(&out, &dataset);
    ok(&out, None, &["extract"]);
    assert_eq!(run(&out, None, &["evolve"]).status.code(), Some(8));
    ok(&out, None, &["evolve", "--force"]);
}

#[test]
fn dry_run_writes_no_store() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ingest(out, &fixture());
    ok(out, None, &["extract"]);
    let printed = ok(out, None, &["evolve", "--dry-run"]);
    assert!(printed.lines().any(|l| l.contains("\"ADD\"")));
    assert!(!out.join("stores").exists());
    assert!(!out.join("manifests/evolve.json").exists());
}

#[test]
fn recorded_run_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("cassette.json");
    let config = dir.path().join("rec.toml");
    fs::write(
        &config,
        format!(
            "[backend]\nmode = \"record\"\ncassette = {:?}\n",
            cassette.display().to_string()
        ),
    )
    .unwrap();
    let out = dir.path().join("ws");
    ingest(&out, &fixture());
    ok(&out, Some(&config), &["extract"]);
    ok(&out, Some(&config), &["evolve"]);
    assert!(cassette.is_file());

    let again = dir.path().join("again");
    let manifest = out.join("manifests/evolve.json");
    let printed = ok(&again, None, &["replay", manifest.to_str().unwrap()]);
    assert!(printed.contains("replay ok: evolve"), "{printed}");
}

#[test]
fn tampered_input_is_a_replay_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ws");
    ingest(&out, &fixture());
    ok(&out, None, &["extract"]);
    let obs = out.join("observations/conv-a.jsonl");
    let mut text = fs::read_to_string(&obs).unwrap();
    text.push('\n');
    fs::write(&obs, text).unwrap();
    let manifest = out.join("manifests/extract.json");
    let o = run(&dir.path().join("again"), None, &["replay", manifest.to_str().unwrap()]);
    // Extract only reads the corpus, so it still replays.
    assert!(o.status.success());
    ok(&out, None, &["evolve"]);
    fs::write(&obs, "").unwrap();
    let manifest = out.join("manifests/evolve.json");
    let o = run(&dir.path().join("third"), None, &["replay", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(10));
}
