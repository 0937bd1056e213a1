use std::path::PathBuf;
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn covsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covsteer")).args(args).output().unwrap()
}

fn arg(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_writes_a_converged_policy() {
    let out = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("spacecraft_mixed.json");
    let res = covsteer(&["plan", arg(&cfg), "--out", arg(out.path())]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("converged after"), "{stdout}");
    for f in ["policy.json", "moments.csv", "scp_trace.csv", "feasibility.json"] {
        assert!(out.path().join(f).exists(), "{f} missing");
    }
    let trace = std::fs::read_to_string(out.path().join("scp_trace.csv")).unwrap();
    assert!(trace.starts_with("# covsteer scp-trace v1"));

    // a converged plan always verifies
    let policy = out.path().join("policy.json");
    let res = covsteer(&["verify", arg(&cfg), arg(&policy), "--out", arg(out.path())]);
    assert_eq!(res.status.code(), Some(0));
}

#[test]
fn shipped_fixtures_verify_with_nonnegative_margins() {
    let out = tempfile::tempdir().unwrap();
    for name in ["spacecraft_mixed", "spacecraft_constrained"] {
        let cfg = scenarios().join(format!("{name}.json"));
        let policy = scenarios().join(format!("fixtures/{name}_policy.json"));
        let res = covsteer(&["verify", arg(&cfg), arg(&policy), "--out", arg(out.path())]);
        assert_eq!(res.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&res.stderr));
        let rep: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.path().join("verify.json")).unwrap()).unwrap();
        assert_eq!(rep["passed"], true);
        for m in rep["margins"].as_array().unwrap() {
            // active constraints sit on the boundary up to solver accuracy
            assert!(m["margin"].as_f64().unwrap() >= -1e-6, "{m}");
        }
    }
}

#[test]
fn mismatched_q_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"system": {"builder": "spacecraft"}, "q": [[1, 0], [0, 1]]}"#).unwrap();
    let res = covsteer(&["plan", arg(&cfg), "--out", arg(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("q: expected 4x4"), "{err}");
}

#[test]
fn infeasible_policy_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("spacecraft_mixed.json");
    let zero = dir.path().join("zero.json");
    let l = vec![vec![vec![0.0; 4]; 2]; 10];
    let v = vec![vec![0.0; 2]; 10];
    std::fs::write(&zero, serde_json::json!({"L": l, "v": v}).to_string()).unwrap();
    let res = covsteer(&["verify", arg(&cfg), arg(&zero), "--out", arg(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn simulate_writes_ellipses_for_every_step() {
    let out = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("spacecraft_mixed.json");
    let policy = scenarios().join("fixtures/spacecraft_mixed_policy.json");
    let res = covsteer(&["simulate", arg(&cfg), arg(&policy), "--samples", "2000", "--seed", "4", "--out", arg(out.path())]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.path().join("ellipses.csv")).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 11 * 2 * 64);
    let summary = std::fs::read_to_string(out.path().join("mc_summary.csv")).unwrap();
    assert!(summary.contains("samples=2000 seed=4"));
}

#[test]
fn oracle_agrees_on_the_scalar_fixture_and_rejects_gaussians() {
    let dir = tempfile::tempdir().unwrap();
    let res = covsteer(&["oracle", arg(&scenarios().join("scalar_two_point.json")), "--out", arg(dir.path())]);
    assert_eq!(res.status.code(), Some(0));
    let res = covsteer(&["oracle", arg(&scenarios().join("spacecraft_mixed.json")), "--out", arg(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
}
