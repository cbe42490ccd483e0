use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sim"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synthetic_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let log = dir.path().join("events.jsonl");
    let o = sim(&[
        "run",
        "--synthetic",
        "--duration",
        "60",
        "--policy",
        "rr",
        "--out",
        csv.to_str().unwrap(),
        "--event-log",
        log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("policy rr"));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body
        .starts_with("request_id,arrival_s,placed_instance,ttft_s,tpot_s,completed_s,rejected\n"));
    assert!(body.contains("# summary"));
    let events = std::fs::read_to_string(&log).unwrap();
    assert!(events
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn trace_file_run() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    std::fs::write(
        &trace,
        "{arrival_ms:0, input_tokens:1024, output_tokens:128}\n",
    )
    .unwrap();
    let o = sim(&[
        "run",
        "--trace",
        trace.to_str().unwrap(),
        "--policy",
        "gyges",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("completed 1"));
}

#[test]
fn bad_format_is_usage_error() {
    let o = sim(&["run", "--synthetic", "--format", "xml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_trace_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    std::fs::write(
        &trace,
        "{arrival_ms:0, input_tokens:1, output_tokens:1}\n{arrival_ms:1, input_tokens:x}\n",
    )
    .unwrap();
    let o = sim(&["run", "--trace", trace.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn ffn_check_passes() {
    let o = sim(&["check-ffn", "--trials", "50"]);
    assert!(o.status.success());
    assert!(stdout(&o).trim_end().ends_with("ok"));
}

#[test]
fn planning_commands() {
    let o = sim(&["plan-weights", "--strategy", "whole-copy"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sim(&[
        "plan-kv",
        "--tp-from",
        "1",
        "--tp-to",
        "2",
        "--requests",
        "1:64",
        "--requests",
        "2:32",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sim(&["tables"]);
    assert!(stdout(&o).contains("64.9%"));
}
