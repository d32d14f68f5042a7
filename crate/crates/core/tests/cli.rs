use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn posctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posctl")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn solve_reports_the_closed_form_value_with_both_methods() {
    let path = fixture("ssp3.json");
    for method in ["vi", "lp"] {
        let v = json(&posctl(&["solve", "--instance", path.to_str().unwrap(), "--method", method]));
        let p: Vec<f64> = serde_json::from_value(v["p"].clone()).unwrap();
        for (got, want) in p.iter().zip([25.0 / 6.0, 10.0 / 3.0, 2.5]) {
            assert!((got - want).abs() < 1e-9, "{method}: {got} vs {want}");
        }
        assert_eq!(v["gain"], serde_json::json!([null, 1, null]));
        assert_eq!(v["gain_display"], "[off, 2, off]");
    }
}

#[test]
fn convert_writes_the_fixture_problem() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("problem.json");
    let status = posctl(&["convert", "--ssp", fixture("ssp3_mdp.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    let got = posctl::PositiveProblem::load(&out).unwrap();
    assert_eq!(got, posctl::fixtures::ssp3_problem());
}

#[test]
fn exit_codes_distinguish_usage_config_and_runtime_errors() {
    assert_eq!(posctl(&["bogus"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad_config = dir.path().join("config.json");
    std::fs::write(&bad_config, r#"{"episodes": 10, "typo": 1}"#).unwrap();
    let out = posctl(&["benchmark", "--config", bad_config.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let unstable = dir.path().join("unstable.json");
    std::fs::write(
        &unstable,
        r#"{"A": [[1.5]], "B": [[0.0]], "E": [[1.0]], "s": [1.0], "r": [0.5], "partition": [1]}"#,
    )
    .unwrap();
    assert_eq!(posctl(&["solve", "--instance", unstable.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn simulate_then_certify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let sim = posctl(&["simulate", "--out-dir", d, "--episodes", "30", "--seed", "4"]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let trajectory = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(trajectory.lines().count() > 1);
    let replay = dir.path().join("replay.json");
    let v = json(&posctl(&["certify", "--replay", replay.to_str().unwrap()]));
    assert_eq!(v["rho"], 0.3);
    assert!(v["tally"]["steps"].as_u64().unwrap() > 0);
}

#[test]
fn benchmark_is_byte_identical_across_invocations() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = posctl(&["benchmark", "--out-dir", d.path().to_str().unwrap(), "--runs", "3", "--episodes", "25", "--seed", "8"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["regret.csv", "condition.csv", "summary.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let regret = std::fs::read_to_string(dirs[0].path().join("regret.csv")).unwrap();
    assert_eq!(regret.lines().count(), 26);
}
