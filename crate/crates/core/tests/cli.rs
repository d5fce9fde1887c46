use std::path::Path;
use std::process::{Command, Output};

const FIXTURE_A: &str = r#"{
    "graph": {"type": "metropolis", "n": 2, "edges": [[1, 2]]},
    "problem": {"type": "quadratic", "spec": {"kind": "explicit", "a": [[[1.0]], [[1.0]]], "b": [[-1.0], [1.0]]}},
    "lambda": 1.0,
    "algorithm": "doboc",
    "eta": 0.5
}"#;

fn doboc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doboc"))
        .args(args)
        .current_dir(dir)
        .env("DOBOC_THREADS", "2")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn edited(field: &str, value: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(FIXTURE_A).unwrap();
    v[field] = serde_json::from_str(value).unwrap();
    v.to_string()
}

#[test]
fn run_converged_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), FIXTURE_A).unwrap();
    let out = doboc(&["run", "--config", "a.json", "--out", "trace.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("status=converged"));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,rounds,messages,f_gap,grad_norm,consensus_err,err_x,err_ybar");
    assert!(lines[1].starts_with("0,0,0,5.0000000000000000e-1,"), "{}", lines[1]);
    // One DOBOC iteration from 0 lands on x* (k = 0 gives the exact step here).
    assert!(lines[2].starts_with("1,1,2,0.0000000000000000e0,"), "{}", lines[2]);
    assert_eq!(lines.len(), 3);
}

#[test]
fn run_budget_exhausted_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited("eta", "0.01").replace("\"eta\"", "\"max_iter\":3,\"eta\"");
    std::fs::write(dir.path().join("slow.json"), cfg).unwrap();
    let out = doboc(&["run", "--config", "slow.json", "--out", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn run_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("missing_k.json", edited("algorithm", "\"doboc-k\""), "`K`"),
        ("unknown.json", edited("colour", "1"), "unknown field"),
        ("syntax.json", "{\n \"graph\": ,}".to_string(), "line 2"),
        ("diverge.json", edited("eta", "50"), "agent"),
        (
            "disconnected.json",
            edited("graph", r#"{"type": "metropolis", "n": 3, "edges": [[1, 2]]}"#),
            "{3}",
        ),
    ];
    for (file, text, needle) in cases {
        std::fs::write(dir.path().join(file), text).unwrap();
        let out = doboc(&["run", "--config", file, "--out", "t.csv"], dir.path());
        assert_eq!(out.status.code(), Some(1), "{file}");
        assert!(stderr(&out).contains(needle), "{file}: {}", stderr(&out));
    }
    let out = doboc(&["run", "--config", "absent.json", "--out", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bounds_prints_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), edited("eta", "\"auto-thm1\"")).unwrap();
    let out = doboc(&["bounds", "--config", "a.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let json_start = text.find('{').unwrap();
    let v: serde_json::Value = serde_json::from_str(text[json_start..].trim()).unwrap();
    for key in ["m", "M", "L", "a", "w_min", "eta_thm1_max", "c", "eta_thm2_max", "epsilon", "preconditions"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["a"], 2.0);
    assert_eq!(v["eta_thm1_max"], 1.0);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = doboc(&["verify", "--scale", "tiny"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(!stdout(&ok).contains("[FAIL]"));
    let bad = doboc(&["verify", "--scale", "tiny", "--inject-bug"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    let text = stdout(&bad);
    assert!(text.contains("[FAIL] oracle_equivalence"));
    assert!(text.contains("first counterexample"));
    let unknown = doboc(&["verify", "--scale", "huge"], dir.path());
    assert_ne!(unknown.status.code(), Some(0));
}
