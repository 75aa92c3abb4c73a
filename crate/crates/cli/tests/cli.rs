//! End-to-end runs of the `qroute` binary on the bundled fixture dump.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/fixture.toml")
}

fn qroute(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qroute"))
        .args(args)
        .arg("-c")
        .arg(config())
        .arg("-o")
        .arg(out)
        .output()
        .expect("spawning qroute")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_all_writes_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&qroute(&["run-all"], tmp.path()));
    for f in [
        "config.resolved.json",
        "ingest/corpus.qrc",
        "splits/00/graph/edges.tsv",
        "splits/00/communities/partition.tsv",
        "splits/00/rank/rankings.jsonl",
        "eval/report.json",
        "eval/metrics.csv",
        "robustness/report.json",
    ] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn eval_without_rank_names_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["ingest", "graph", "communities", "activity", "train"] {
        ok(&qroute(&[stage], tmp.path()));
    }
    let o = qroute(&["eval"], tmp.path());
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("qroute rank"), "{e}");
}

#[test]
fn stage_before_ingest_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qroute(&["graph"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("qroute ingest"), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&qroute(&["run-all", "--threads", "1"], a.path()));
    ok(&qroute(&["run-all"], b.path()));
    for f in [
        "eval/report.json",
        "eval/metrics.csv",
        "splits/00/rank/rankings.jsonl",
        "splits/00/communities/partition.tsv",
        "robustness/report.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn changed_seed_rejects_stale_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&qroute(&["run-all"], tmp.path()));
    let o = qroute(&["eval", "--seed", "8"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("different configuration"), "{}", stderr(&o));
    // the thread count is not part of the fingerprint
    ok(&qroute(&["eval", "--threads", "1"], tmp.path()));
}

#[test]
fn json_summary_parses() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qroute(&["ingest", "--json"], tmp.path());
    ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ingest"]["parse"]["questions"], 4);
    assert_eq!(v["ingest"]["parse"]["answers"], 5);
}

#[test]
fn unknown_config_field_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[data.synth]\n[experiment]\nnq = 2\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qroute"))
        .args(["ingest", "-c"])
        .arg(&cfg)
        .arg("-o")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nq"), "{}", stderr(&o));
}
