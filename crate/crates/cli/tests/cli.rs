use std::path::Path;
use std::process::{Command, Output};

use contrastaug_core::gateway::mock::MockWorld;
use contrastaug_core::human_eval::SessionStore;

fn contrastaug(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contrastaug"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = contrastaug(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn corpus(dir: &Path) {
    let world = MockWorld::species(10);
    world.write_corpus(&dir.join("corpus"), 35).unwrap();
    world.save(&dir.join("corpus/mock_world.json")).unwrap();
    ok(dir, &["ingest", "--root", "corpus", "--out", "raw.jsonl", "--extensions", "img"]);
    ok(dir, &["split", "--manifest", "raw.jsonl", "--out", "manifest.jsonl"]);
}

#[test]
fn stages_run_one_by_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    let m = ["--mock", "--manifest", "manifest.jsonl", "--corpus", "corpus"];
    let with = |rest: &[&'static str]| -> Vec<&str> { rest.iter().copied().chain(m).collect() };
    assert_eq!(ok(d, &with(&["verify"])).trim(), "ok");
    ok(d, &with(&["discover-pairs", "--out", "pairs.jsonl"]));
    assert!(d.join("probes.jsonl").is_file());
    ok(d, &with(&["extract-features", "--pairs", "pairs.jsonl", "--contrastive", "--out", "features.jsonl"]));
    ok(d, &with(&["filter-features", "--features", "features.jsonl", "--out", "selected.jsonl"]));
    ok(d, &with(&["augment", "--selected", "selected.jsonl", "--n", "12", "--out", "batches.jsonl"]));
    let acc = ok(
        d,
        &with(&["evaluate", "--features", "selected.jsonl", "--pairs", "pairs.jsonl", "--in-context", "--out", "eval.json"]),
    );
    assert!(!acc.is_empty());
    ok(d, &with(&["export-finetune", "--batches", "batches.jsonl", "--pairs", "pairs.jsonl", "--ratio", "5:1", "--out", "ft.jsonl"]));
    for file in ["pairs.jsonl", "features.jsonl", "selected.jsonl", "batches.jsonl", "eval.json", "ft.jsonl"] {
        assert!(d.join(file).is_file(), "{file}");
        assert!(d.join(format!("{file}.meta.json")).is_file(), "{file} meta");
    }

    ok(
        d,
        &with(&[
            "human-eval", "create", "--sessions", "sessions", "--id", "s1", "--features", "selected.jsonl",
            "--batches", "batches.jsonl", "--condition", "synthetic-target", "--items", "4", "--annotators", "a1,a2",
        ]),
    );
    let (session, _) = SessionStore::new(d.join("sessions")).load("s1").unwrap();
    let incomplete = contrastaug(d, &["human-eval", "stats", "--sessions", "sessions", "--id", "s1"]);
    assert!(!incomplete.status.success());
    for item in 0..session.items.len() {
        for annotator in ["a1", "a2"] {
            let item = item.to_string();
            let args = ["human-eval", "record", "--sessions", "sessions", "--id", "s1", "--annotator", annotator];
            let mut args: Vec<&str> = args.to_vec();
            args.extend(["--item", &item, "--judgment", "yes"]);
            ok(d, &args);
        }
    }
    let stats: serde_json::Value =
        serde_json::from_str(&ok(d, &["human-eval", "stats", "--sessions", "sessions", "--id", "s1"])).unwrap();
    assert_eq!(stats["items"], session.items.len());
}

#[test]
fn missing_input_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    let out = contrastaug(
        d,
        &["--mock", "filter-features", "--manifest", "manifest.jsonl", "--features", "features.jsonl", "--out", "s.jsonl"],
    );
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("missing input") && err.contains("features.jsonl"), "{err}");
    assert!(!d.join("s.jsonl").exists());
}

#[test]
fn failed_stage_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    std::fs::write(d.join("features.jsonl"), "{not json\n").unwrap();
    std::fs::write(d.join("pairs.jsonl"), "").unwrap();
    let out = contrastaug(
        d,
        &[
            "--mock", "filter-features", "--manifest", "manifest.jsonl", "--features", "features.jsonl", "--pairs",
            "pairs.jsonl", "--out", "s.jsonl",
        ],
    );
    assert!(!out.status.success());
    assert!(!d.join("s.jsonl").exists());
    assert!(!d.join("s.jsonl.meta.json").exists());
    let leftovers: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(leftovers.iter().all(|n| !n.to_string_lossy().starts_with("s.jsonl")), "{leftovers:?}");
}

#[test]
fn config_values_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    MockWorld::species(4).write_corpus(&d.join("corpus"), 3).unwrap();
    std::fs::write(d.join("run.toml"), "seed = ${RUN_SEED}\n").unwrap();
    let run = |env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_contrastaug"));
        cmd.current_dir(d).env_remove("RUN_SEED");
        if let Some(v) = env {
            cmd.env("RUN_SEED", v);
        }
        cmd.args(["--config", "run.toml", "ingest", "--root", "corpus", "--out", "m.jsonl", "--extensions", "img"]);
        cmd.output().unwrap()
    };
    let missing = run(None);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("RUN_SEED"), "{}", stderr(&missing));
    assert!(run(Some("41")).status.success());
    let header = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"], 41);
}
