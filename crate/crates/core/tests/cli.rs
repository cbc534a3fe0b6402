use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn opdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opdlab")).args(args).output().unwrap()
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn recipe(name: &str) -> PathBuf {
    root().join("recipes").join(name)
}

fn report_fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = opdlab(&["run", "--config", "/nonexistent/recipe.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/recipe.toml"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(opdlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(opdlab(&["run"]).status.code(), Some(2));
}

#[test]
fn shared_rule_recipe_writes_telemetry_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let o = opdlab(&["run", "--config", s(&recipe("opsd-shared-rule.toml")), "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("telemetry.csv")).unwrap();
    assert!(csv.starts_with("step,phase,"));
    // Header, init row, one row per step.
    assert_eq!(csv.lines().count(), 502);
    let snapshot = std::fs::read_to_string(dir.path().join("policy.txt")).unwrap();
    assert!(!snapshot.is_empty());
    assert!(dir.path().join("eval.json").exists());
    assert!(stdout(&o).contains("accuracy"));
}

#[test]
fn seed_override_is_deterministic_and_effective() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = recipe("opsd-shared-rule.toml");
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = opdlab(&["run", "--config", s(&cfg), "--seed", seed, "--out-dir", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("telemetry.csv")).unwrap()
    };
    let a = run("5", "a");
    let b = run("5", "b");
    let c = run("6", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_step_budget_reports_initial_eval_only() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(recipe("opsd-shared-rule.toml")).unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, text.replace("steps = 500", "steps = 0")).unwrap();
    let out = dir.path().join("run");
    let o = opdlab(&["run", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = opdlab(&["report", s(&out.join("telemetry.csv"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("rows              1\n"), "{text}");
    assert!(text.contains("training steps    0\n"));
    assert!(text.contains("phases            none\n"));
    assert!(text.contains("final reward      n/a\n"));
}

#[test]
fn report_matches_golden_text() {
    for name in ["base", "init-only"] {
        let o = opdlab(&["report", s(&report_fixture(&format!("{name}.csv")))]);
        assert!(o.status.success(), "{}", stderr(&o));
        let want = std::fs::read_to_string(report_fixture(&format!("{name}.txt"))).unwrap();
        assert_eq!(stdout(&o), want, "fixture {name}");
    }
}

#[test]
fn one_changed_row_changes_only_its_aggregates() {
    let a = stdout(&opdlab(&["report", s(&report_fixture("base.csv"))]));
    let b = stdout(&opdlab(&["report", s(&report_fixture("one-row-changed.csv"))]));
    let diff: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    // Only the last row's mean length moved.
    assert_eq!(diff, vec![(
        "mean length       4.0000 -> 6.0000 (+2.0000)",
        "mean length       4.0000 -> 7.0000 (+3.0000)"
    )]);
}

#[test]
fn malformed_csv_exits_2() {
    let o = opdlab(&["report", s(&report_fixture("malformed.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: csv:"), "{}", stderr(&o));
    let o = opdlab(&["report", "/nonexistent/telemetry.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = opdlab(&["grad-check", "--objective", "jsd", "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("grad_check.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
}

#[test]
fn query_teacher_over_the_pipe_prints_one_line_per_request() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/protocol/teacher.json");
    let req = dir.path().join("req.json");
    std::fs::write(
        &req,
        r#"[{"request_id": 1, "prompt": 0, "response": [16, 14, 19], "token_ids_logprob": [14, 16, 19]},
            {"request_id": 2, "prompt": 1, "response": [16], "token_ids_logprob": [3]}]"#,
    )
    .unwrap();
    let o = opdlab(&["query-teacher", "--transport", "pipe", "--endpoint", s(&teacher), "--request", s(&req)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["logprobs"].as_array().unwrap().len(), 3);
    assert_eq!(lines[0]["logprobs"][0].as_array().unwrap().len(), 3);
    assert_eq!(lines[1]["request_id"], 2);
}
