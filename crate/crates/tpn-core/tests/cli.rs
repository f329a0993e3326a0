//! End-to-end exercises of the `tpn` binary: exit codes, the
//! gen-data/train/eval round trip, and byte-level determinism of the
//! report output.

use std::path::PathBuf;
use std::process::{Command, Output};

fn tpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpn")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn tmp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("tpn-cli-{}-{name}", std::process::id()))
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["train", "--help"][..]] {
        let out = tpn(args);
        assert_eq!(out.status.code(), Some(0), "{args:?} failed: {}", stderr(&out));
    }
    assert!(stdout(&tpn(&["--help"])).contains("semi-eval"));
}

#[test]
fn usage_errors_exit_one() {
    let out = tpn(&["eval"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tpn(&["--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tpn(&[
        "gen-data",
        "--kind",
        "mystery",
        "--classes",
        "4",
        "--per-class",
        "8",
        "--noise",
        "0.1",
        "--out",
        "/tmp/nope.fsds",
    ]);
    assert_eq!(out.status.code(), Some(1), "unknown kind should be a usage error");
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn missing_data_exits_two() {
    let out = tpn(&["inspect-checkpoint", "/definitely/not/there.ckpt"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn round_trip_and_determinism() {
    let data = tmp("blobs.fsds");
    let ckpt = tmp("model.ckpt");
    let metrics = tmp("metrics.csv");

    let out = tpn(&[
        "gen-data",
        "--kind",
        "gaussian-blobs",
        "--classes",
        "15",
        "--per-class",
        "20",
        "--noise",
        "0.3",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let out = tpn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
        "--n-way",
        "3",
        "--query",
        "5",
        "--max-episodes",
        "40",
        "--checkpoint-every",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let logged = std::fs::read_to_string(&metrics).unwrap();
    assert!(logged.starts_with("episode,loss,lr,query_acc"));
    assert_eq!(logged.lines().count(), 41, "header plus one row per episode");

    let inspect = tpn(&["inspect-checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(inspect.status.code(), Some(0));
    let text = stdout(&inspect);
    assert!(text.contains("episodes_seen = 40"));
    assert!(text.contains("name,shape,count"));

    let eval_args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "all",
        "--n-way",
        "3",
        "--query",
        "5",
        "--episodes",
        "40",
        "--seed",
        "9",
    ];
    let first = tpn(&eval_args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let report = stdout(&first);
    assert!(report.contains("tag,n_way,k_shot,query,episodes,mean_acc,ci95,seconds"));
    let row = report.lines().last().unwrap();
    assert!(row.starts_with("tpn,3,1,5,40,"), "unexpected report row: {row}");
    assert!(row.ends_with(",0.000"), "seconds must be zeroed without --timing: {row}");

    let second = tpn(&eval_args);
    assert_eq!(stdout(&second), report, "same invocation must print identical bytes");

    let baseline = tpn(&[
        "eval-baseline",
        "prototype",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "all",
        "--n-way",
        "3",
        "--query",
        "5",
        "--episodes",
        "40",
        "--seed",
        "9",
    ]);
    assert_eq!(baseline.status.code(), Some(0), "{}", stderr(&baseline));
    assert!(stdout(&baseline).lines().last().unwrap().starts_with("prototype,3,1,5,40,"));

    let sweep = tpn(&[
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--param",
        "alpha",
        "--values",
        "0.5,0.9",
        "--n-way",
        "3",
        "--query",
        "5",
        "--max-episodes",
        "30",
        "--episodes",
        "20",
    ]);
    assert_eq!(sweep.status.code(), Some(0), "{}", stderr(&sweep));
    let csv = stdout(&sweep);
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "param,value,tag,n_way,k_shot,query,episodes,mean_acc,ci95,seconds"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per swept value: {csv}");
    assert!(rows[0].starts_with("alpha,0.5,"));
    assert!(rows[1].starts_with("alpha,0.9,"));

    for p in [&data, &ckpt, &metrics] {
        let _ = std::fs::remove_file(p);
    }
    let _ = std::fs::remove_file(data.with_extension("split"));
}

#[test]
fn gradcheck_command_reports_pass() {
    let out = tpn(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("group,entries,max_rel,max_abs,status"));
    assert!(text.contains("# gradcheck PASS"));
}
