use std::path::Path;
use std::process::Command;

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lpstream")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn sharded_sketches_merge_to_the_whole() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run(d, &["gen", "--kind", "planted-heavy", "--n", "300", "--d", "3", "--out", "data"]);
    run(d, &["sketch", "--stream", "data/stream.txt", "--k", "10", "--out", "whole"]);
    run(d, &["sketch", "--stream", "data/stream.txt", "--k", "10", "--shard", "0/2", "--out", "a"]);
    run(d, &["sketch", "--stream", "data/stream.txt", "--k", "10", "--shard", "1/2", "--out", "b"]);
    run(d, &["merge", "a/sketch.snap", "b/sketch.snap", "--out", "m"]);
    assert_eq!(std::fs::read(d.join("whole/sketch.snap")).unwrap(), std::fs::read(d.join("m/sketch.snap")).unwrap());
    run(d, &["extract", "--snapshot", "m/sketch.snap", "--out", "h"]);
    assert!(d.join("h/heavy.csv").exists());
}

#[test]
fn coreset_then_solve() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run(d, &["gen", "--kind", "gaussian", "--fold", "logistic", "--n", "800", "--d", "3", "--out", "data"]);
    run(d, &["coreset", "--stream", "data/stream.txt", "--loss", "logistic", "--k", "100", "--out", "c"]);
    run(d, &["solve", "--coreset", "c/coreset.csv", "--out", "s"]);
    let sol: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("s/solution.json")).unwrap()).unwrap();
    assert!(sol["objective"].as_f64().unwrap().is_finite());
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.txt"), "not a stream\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lpstream"))
        .current_dir(tmp.path())
        .args(["sketch", "--stream", "bad.txt", "--k", "5", "--out", "o"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
