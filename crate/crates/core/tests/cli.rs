use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intentrec::store::{self, Manifest};

const STAGES: [&str; 7] = [
    "ingest",
    "graph",
    "tensor",
    "factorize",
    "kalman",
    "train-rank",
    "evaluate",
];

fn intentrec(wd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intentrec"))
        .arg("--workdir")
        .arg(wd)
        .args(args)
        .output()
        .expect("spawn intentrec")
}

fn ok(wd: &Path, args: &[&str]) -> String {
    let out = intentrec(wd, args);
    assert!(
        out.status.success(),
        "intentrec {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_synth(wd: &Path) {
    ok(
        wd,
        &["synth", "--users", "30", "--sessions", "6", "--seed", "3"],
    );
}

fn run_all(wd: &Path) {
    small_synth(wd);
    for stage in STAGES {
        ok(wd, &[stage]);
    }
}

/// Every artifact except the manifests, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with("manifests") {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn manifest(wd: &Path, stage: &str) -> Manifest {
    store::read_json(&wd.join("manifests").join(format!("{stage}.json"))).unwrap()
}

#[test]
fn staged_run_writes_manifests_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    run_all(wd);

    for stage in std::iter::once("synth").chain(STAGES) {
        let m = manifest(wd, stage);
        assert_eq!(m.stage, stage);
        assert!(!m.outputs.is_empty(), "{stage} lists no outputs");
        if stage != "synth" {
            assert!(!m.inputs.is_empty(), "{stage} records no inputs");
        }
    }
    let results = fs::read_to_string(wd.join("results.csv")).unwrap();
    assert!(results.lines().count() > 1);

    let first = snapshot(wd);
    let manifests: Vec<Manifest> = STAGES.iter().map(|s| manifest(wd, s)).collect();
    run_all(wd);
    let second = snapshot(wd);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (path, bytes) in &first {
        assert!(
            bytes == &second[path],
            "{} changed on rerun",
            path.display()
        );
    }
    for (before, stage) in manifests.iter().zip(STAGES) {
        let after = manifest(wd, stage);
        assert_eq!(before.inputs_hash, after.inputs_hash, "{stage}");
        assert_eq!(before.config, after.config, "{stage}");
        assert_eq!(before.outputs, after.outputs, "{stage}");
    }
}

#[test]
fn evaluate_without_factors_names_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    small_synth(wd);
    ok(wd, &["ingest"]);
    ok(wd, &["graph"]);
    let out = intentrec(wd, &["evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("factors"), "{err}");
    assert!(err.contains("factorize"), "{err}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    // unknown subcommand and bad values are usage errors
    assert_eq!(intentrec(wd, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        intentrec(wd, &["graph", "--rank", "zero"]).status.code(),
        Some(2)
    );
    assert_eq!(
        intentrec(wd, &["synth", "--rho", "1.5"]).status.code(),
        Some(2)
    );
    // nothing to ingest yet
    assert_eq!(intentrec(wd, &["ingest"]).status.code(), Some(3));
    assert_eq!(intentrec(wd, &["graph"]).status.code(), Some(3));

    let garbage = wd.join("garbage.jsonl");
    fs::write(&garbage, "not json\n{\"also\": \"wrong\"}\n").unwrap();
    let out = intentrec(wd, &["ingest", "--input", garbage.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn recommend_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    run_all(wd);

    let train = store::read_sessions(&wd.join("sessions").join("train.jsonl")).unwrap();
    let hit = &train[0].hits[0];
    let out = ok(
        wd,
        &[
            "recommend",
            "--user",
            &hit.user_id,
            "--current",
            &hit.report_id,
        ],
    );
    let response: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(response["user"], hit.user_id.as_str());
    assert!(
        response["recs"].as_array().is_some_and(|r| !r.is_empty()),
        "{out}"
    );

    let out = ok(wd, &["sweep"]);
    let lines: Vec<&str> = out.lines().collect();
    // header, one row per rank, best line
    assert_eq!(lines.len(), 5, "{out}");
    for (line, r) in lines[1..4].iter().zip(["2", "5", "8"]) {
        assert_eq!(line.split_whitespace().next(), Some(r));
    }
    assert!(lines[4].starts_with("best R = "), "{out}");
    assert!(wd.join("sweep.csv").is_file());
}
