use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use ci3p3_core::engine::CohortRecord;
use ci3p3_core::{DcCoord, DesignParams, DoseGrid, Recommendation, Trial};
use ci3p3_service::Store;
use serde_json::Value;

fn ci3p3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ci3p3")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const GOLDEN: [(u32, u32, u32); 10] =
    [(1, 1, 0), (2, 1, 0), (2, 2, 2), (2, 1, 1), (3, 1, 0), (3, 2, 1), (3, 2, 1), (3, 2, 0), (3, 3, 3), (3, 2, 0)];

fn init_golden(state: &Path) {
    let o = ci3p3(&["init", "--state", path(state), "--rows", "3", "--cols", "3", "--max-n", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn table_formats_agree() {
    let text = ci3p3(&["table", "--pt", "0.3", "--eps1", "0.05", "--eps2", "0.05", "--nmax", "12"]);
    assert!(text.status.success());
    let csv = ci3p3(&["table", "--nmax", "12", "--format", "csv"]);
    let csv = stdout(&csv);
    assert_eq!(csv.lines().next(), Some("n,y,decision"));
    assert_eq!(csv.lines().count() - 1, (1..=12).map(|n| n + 1).sum::<usize>());
    // every csv cell shows up in the text grid at row y, column n
    let text = stdout(&text);
    let grid: Vec<Vec<&str>> = text.lines().skip(2).map(|l| l.split_whitespace().skip(1).collect()).collect();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (n, y): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        // blank cells (y > n) are skipped in the text row, so index by position among n >= y
        assert_eq!(grid[y][n - y.max(1)], f[2], "n={n} y={y}");
    }
}

#[test]
fn invalid_interval_is_a_config_error() {
    let o = ci3p3(&["table", "--pt", "0.05", "--eps1", "0.05"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("p_T - eps1 must be > 0"));
}

#[test]
fn golden_trial_via_decide() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("trial.json");
    init_golden(&state);
    for (i, j, y) in GOLDEN {
        let o = ci3p3(&["decide", "--state", path(&state), "--dc", &format!("{i},{j}"), "--dlt", &y.to_string()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = ci3p3(&["decide", "--state", path(&state), "--json"]);
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["recommendation"], serde_json::json!({ "stop": "max_n" }));
    let o = ci3p3(&["finalize", "--state", path(&state)]);
    assert!(stdout(&o).contains("MTDC: d32 (2/12 DLT"), "{}", stdout(&o));
}

#[test]
fn decide_requires_override_off_recommendation() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("trial.json");
    init_golden(&state);
    let o = ci3p3(&["decide", "--state", path(&state), "--dc", "d12", "--dlt", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ci3p3(&["decide", "--state", path(&state), "--dc", "d12", "--dlt", "0", "--override", "--json"]);
    assert!(o.status.success());
    let trial = Trial::from_json(&std::fs::read_to_string(&state).unwrap()).unwrap();
    assert!(trial.state().log[0].overridden);
}

#[test]
fn dry_run_leaves_state_untouched_and_matches_what_if() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("trial.json");
    init_golden(&state);
    for (i, j, y) in &GOLDEN[..4] {
        ci3p3(&["decide", "--state", path(&state), "--dc", &format!("{i},{j}"), "--dlt", &y.to_string()]);
    }
    let before = std::fs::read_to_string(&state).unwrap();
    let trial = Trial::from_json(&before).unwrap();
    let rec = trial.next_assignment().dc().unwrap();
    for y in 0..=3u32 {
        let o = ci3p3(&["decide", "--state", path(&state), "--dc", &format!("{},{}", rec.i, rec.j), "--dlt", &y.to_string(), "--dry-run", "--json"]);
        let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(doc["saved"], false);
        let preview = serde_json::to_value(trial.what_if(y).unwrap().next).unwrap();
        assert_eq!(doc["recommendation"], preview, "y={y}");
    }
    assert_eq!(std::fs::read_to_string(&state).unwrap(), before);
}

#[test]
fn tampered_state_exits_with_integrity_code() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("trial.json");
    init_golden(&state);
    ci3p3(&["decide", "--state", path(&state), "--dc", "1,1", "--dlt", "0"]);
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&state).unwrap()).unwrap();
    doc["dcs"][0][0]["y"] = Value::from(1);
    std::fs::write(&state, doc.to_string()).unwrap();
    let o = ci3p3(&["decide", "--state", path(&state)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn conduct_persists_each_entry() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("trial.json");
    init_golden(&state);
    let mut child = Command::new(env!("CARGO_BIN_EXE_ci3p3"))
        .args(["conduct", "--state", path(&state)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"0\nwhat 2\n0\n7\nq\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("if 2 DLTs"), "{text}");
    assert!(text.contains("not recorded"), "{text}");
    let trial = Trial::from_json(&std::fs::read_to_string(&state).unwrap()).unwrap();
    let dcs: Vec<DcCoord> = trial.state().log.iter().map(|r| r.dc).collect();
    assert_eq!(dcs, vec![DcCoord::new(1, 1), DcCoord::new(2, 1)]);
}

#[test]
fn simulate_with_config_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"schema_version": 1, "scenarios": ["study1/sc3", "study1/sc7"], "n_reps": 20, "master_seed": 4, "workers": 2, "output": {"dir": "out"}}"#,
    )
    .unwrap();
    let o = ci3p3(&["simulate", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pcs"));
    let csv = std::fs::read_to_string(dir.path().join("out/oc.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);
    assert!(dir.path().join("out/oc_long.csv").is_file());
    let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/oc.json")).unwrap()).unwrap();
    assert_eq!(json["scenarios"].as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "reps": 5}"#).unwrap();
    assert_eq!(ci3p3(&["simulate", "--config", path(&cfg)]).status.code(), Some(2));
    std::fs::write(&cfg, r#"{"scenarios": ["study1"]}"#).unwrap();
    assert_eq!(ci3p3(&["simulate", "--config", path(&cfg)]).status.code(), Some(2));
    std::fs::write(&cfg, r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(ci3p3(&["simulate", "--config", path(&cfg)]).status.code(), Some(2));
}

#[test]
fn scenarios_export_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let o = ci3p3(&["scenarios", "--suite", "study2", "--out", path(dir.path())]);
    assert!(o.status.success());
    let hist = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist, "category,count\nall_safe,13\n1,18\n2,24\n3,5\n>3,18\nall_toxic,22\n");
    assert!(dir.path().join("study2_099.csv").is_file());
    assert_eq!(std::fs::read_to_string(dir.path().join("classification.csv")).unwrap().lines().count(), 101);
}

/// The same cohort script through the command line and through the service's
/// store yields the same event log and recommendations.
#[test]
fn cli_and_service_agree() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("trial.json");
    init_golden(&state);
    let store = Store::open(dir.path().join("data")).unwrap();
    let params = DesignParams { max_n: 30, ..DesignParams::default() };
    let id = store.create(DoseGrid::new(3, 3).unwrap(), params).unwrap().id;

    for (k, (i, j, y)) in GOLDEN.into_iter().enumerate() {
        let o = ci3p3(&["decide", "--state", path(&state), "--dc", &format!("{i},{j}"), "--dlt", &y.to_string(), "--json"]);
        let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
        let (rec, _) = store.record(&id, DcCoord::new(i, j), y, k as u64, false).unwrap();
        let service_next: Recommendation = rec.trial.next_assignment();
        assert_eq!(doc["recommendation"], serde_json::to_value(service_next).unwrap(), "cohort {}", k + 1);
    }
    let cli = Trial::from_json(&std::fs::read_to_string(&state).unwrap()).unwrap();
    let service = store.get(&id).unwrap();
    let service_log: Vec<CohortRecord> = service.events.iter().map(|e| e.record).collect();
    assert_eq!(cli.state().log, service_log);
    assert_eq!(cli.state(), service.trial.state());
}
