use std::process::{Command, Output};

use serde_json::Value;

fn gamehedge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gamehedge")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn envelope_values() {
    let out = gamehedge(&["envelope", "call", "--K", "100", "--delta", "40", "--at", "50", "--at", "0"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["rows"][0]["value"], 20.0);
    assert_eq!(v["rows"][1]["value"], 0.0);
    assert_eq!(v["rows"][1]["branch"], "base");
    assert_eq!(v["a"][0], 100.0);

    let out = gamehedge(&["envelope", "spread", "--K", "2", "--delta", "3", "--at", "1,1"]);
    assert_eq!(json(&out)["rows"][0]["value"], 3.0);

    let out = gamehedge(&["envelope", "put", "--delta", "40", "--grid", "0:200:5", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("x_1,F,R,branch"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn option_spec_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("call.json");
    let spec = r#"{"dim": 1, "pieces": [{"a": [0.0], "b": 0.0}, {"a": [1.0], "b": -100.0}], "penalty": 40.0, "maturity": 1.0}"#;
    std::fs::write(&path, spec).unwrap();
    let out = gamehedge(&["envelope", path.to_str().unwrap(), "--at", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["rows"][0]["value"], 20.0);

    std::fs::write(&path, "{not json").unwrap();
    assert_eq!(code(&gamehedge(&["envelope", path.to_str().unwrap(), "--at", "1"])), 2);
    assert_eq!(code(&gamehedge(&["envelope", "missing.json", "--at", "1"])), 2);
    assert_eq!(code(&gamehedge(&["envelope", "call", "--at", "1,x"])), 2);
}

#[test]
fn hedge_verify_exit_codes() {
    let base = ["hedge-verify", "call", "--K", "100", "--delta", "40", "--s", "50", "--paths", "2000", "--steps", "200"];
    let out = gamehedge(&base);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["violations"].as_array().unwrap().len(), 0);

    // 1% of R(50) = 20
    let mut short = base.to_vec();
    short.extend(["--capital-offset", "-0.2"]);
    let out = gamehedge(&short);
    assert_eq!(code(&out), 3);
    assert!(!json(&out)["violations"].as_array().unwrap().is_empty());

    let out = gamehedge(&["hedge-verify", "call", "--s", "150", "--paths", "200", "--steps", "50"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["cancel_rule"], "immediate");
    assert_eq!(v["sigma_distribution"]["counts"][0], 200);

    assert_eq!(code(&gamehedge(&["hedge-verify", "call", "--kappa", "1.5", "--paths", "10", "--steps", "10"])), 2);
}

#[test]
fn paths_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("paths.csv");
    let csv = csv.to_str().unwrap();
    let common = ["hedge-verify", "put", "--delta", "40", "--s", "80", "--steps", "40"];
    let mut first = common.to_vec();
    first.extend(["--paths", "50", "--seed", "9", "--export-paths", csv]);
    let a = gamehedge(&first);
    assert_eq!(code(&a), 0);
    let mut second = common.to_vec();
    second.extend(["--paths-csv", csv]);
    let b = gamehedge(&second);
    assert_eq!(code(&b), 0);
    assert_eq!(json(&a)["min_margin"], json(&b)["min_margin"]);
}

#[test]
fn dual_bound_reports() {
    let out = gamehedge(&["dual-bound", "call", "--s", "50", "--n", "300", "--upper", "0"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["value"], 0.0);

    let out = gamehedge(&["dual-bound", "put", "--delta", "150", "--s", "80", "--n", "500"]);
    let v = json(&out);
    assert!((v["value"].as_f64().unwrap() - 100.0).abs() <= 2.0, "{v}");

    let out = gamehedge(&["dual-bound", "call", "--s", "50", "--n", "2000"]);
    assert!(json(&out)["fraction"].as_f64().unwrap() >= 0.98);

    assert_eq!(code(&gamehedge(&["dual-bound", "call", "--s", "50", "--n", "100", "--upper", "1000"])), 2);
}

#[test]
fn cps_check_band() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.csv");
    let args = [
        "cps-check", "--s", "100", "--levels", "4", "--control", "0.03", "--vol", "0.03", "--drift", "0.01", "--rate",
        "0.01", "--paths", "1000",
    ];
    let mut with_weights = args.to_vec();
    with_weights.extend(["--weights-csv", weights.to_str().unwrap()]);
    let out = gamehedge(&with_weights);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["band"]["ok"], true);
    assert!(v["band"]["unfrozen_paths"].as_u64().unwrap() > 0);
    let text = std::fs::read_to_string(&weights).unwrap();
    assert_eq!(text.lines().next(), Some("path_id,step,weight"));
    assert_eq!(text.lines().count(), 1 + 1000 * 5);

    let mut zero = args.to_vec();
    zero.extend(["--epsilon", "0"]);
    assert_eq!(code(&gamehedge(&zero)), 3);
}

#[test]
fn examples_pass() {
    for name in ["call-i", "call-ii", "put-i", "put-ii", "callput-i", "callput-ii"] {
        let out = gamehedge(&["example", name]);
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json(&out)["passed"], true);
    }
    let out = gamehedge(&["example", "nonconstant-penalty", "--r", "0.05", "--T", "1"]);
    assert_eq!(code(&out), 0);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.lines().all(|l| l.starts_with("PASS")));

    let out = gamehedge(&["example", "unbounded-rate", "--paths", "1000", "--steps", "200"]);
    assert_eq!(code(&out), 0);

    assert_eq!(code(&gamehedge(&["example", "call-ii", "--delta", "150"])), 2);
}

#[test]
fn thread_cap_from_environment() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_gamehedge"))
            .args(["envelope", "call", "--at", "1"])
            .env("GAMEHEDGE_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("2")), 0);
    assert_eq!(code(&run("0")), 2);
    assert_eq!(code(&run("many")), 2);
}

#[test]
fn deterministic_under_seed() {
    let args = ["hedge-verify", "call", "--s", "50", "--paths", "300", "--steps", "60", "--seed", "5"];
    assert_eq!(gamehedge(&args).stdout, gamehedge(&args).stdout);
    let mut seq = args.to_vec();
    seq.push("--sequential");
    assert_eq!(gamehedge(&args).stdout, gamehedge(&seq).stdout);
}
