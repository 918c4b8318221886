use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coupled-market"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn solve_prints_the_closed_form_prices() {
    let e1 = fixture("e1.json");
    let out = run(&["solve", "--instance", e1.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("p_B M1/B1 = 5.550000"), "{text}");
    assert!(text.contains("p_D D1/M1 = 3.227273"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("iterations = ")));
}

#[test]
fn solve_writes_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let trace = dir.path().join("trace.csv");
    let e2 = fixture("e2.json");
    let out = run(&[
        "solve",
        "--instance",
        e2.to_str().unwrap(),
        "--schedule",
        "async",
        "--seed",
        "9",
        "--out",
        report.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["converged"], true);
    assert_eq!(doc["schedule"], "async");
    let p = doc["buyer_prices"][0]["price"].as_f64().unwrap();
    assert!((p - 3.5).abs() < 1e-9);
    let rows = doc["residual_trace"].as_array().unwrap().len();
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), rows + 1);
}

#[test]
fn fee_prints_the_largest_fee() {
    let e1 = fixture("e1.json");
    let out = run(&["fee", "--instance", e1.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("tau_star = 0.944500"), "{text}");
    assert!(text.contains("binding_model = M1"));
}

#[test]
fn shapley_normalizes_subset_utilities() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table.json");
    let u = fixture("e2_utility.json");
    let out = run(&["shapley", "--instance", u.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    let shares = &doc[0]["shares"];
    assert!((shares["D1"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((shares["D2"].as_f64().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn baseline_and_envelope_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let e1 = fixture("e1.json");
    let out = run(&["baseline", "--instance", e1.to_str().unwrap(), "--method", "sf"]);
    assert!(stdout(&out).contains("p_B M1/B1 = 5.300000"), "{}", stdout(&out));

    let csv = dir.path().join("frontier.csv");
    let out = run(&["envelope", "--instance", e1.to_str().unwrap(), "--grid", "1,2", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "axis1,axis2_analytic_max,axis2_numeric_max,binding_model,binding_buyer");
    assert!(lines[1].starts_with("1,1890,"), "{}", lines[1]);
    assert!(lines[2].starts_with("2,940,"), "{}", lines[2]);
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for path in [&a, &b] {
        let out = run(&["generate", "--seed", "11", "--rho", "0.8", "--out", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let out = run(&["solve", "--instance", a.to_str().unwrap()]);
    assert!(out.status.success());
}

#[test]
fn experiments_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for (kind, file, header) in [
        ("fairness", "fairness.csv", "rho,method,model,spearman,sv,share"),
        ("stress", "stress.csv", "axis,value,method,success_rate"),
        ("propagation", "propagation.csv", "stage,method,side,value"),
        ("envelope", "envelope.csv", "panel,x,analytic_y,numeric_y"),
    ] {
        let out = run(&["experiment", kind, "--out", d, "--seeds", "2"]);
        assert!(out.status.success(), "{kind}: {}", stderr(&out));
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().next().unwrap(), header);
        assert!(text.lines().count() > 1);
    }
    let first = std::fs::read(dir.path().join("stress.csv")).unwrap();
    run(&["experiment", "stress", "--out", d, "--seeds", "2"]);
    assert_eq!(std::fs::read(dir.path().join("stress.csv")).unwrap(), first);
}

#[test]
fn invalid_input_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("e1.json")).unwrap()).unwrap();
    doc["datasets"][0]["kappa_d"] = serde_json::json!(-1.0);
    std::fs::write(&bad, doc.to_string()).unwrap();

    let out = run(&["solve", "--instance", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("/datasets/0/kappa_d"), "{err}");

    let out = run(&["solve", "--instance", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let e1 = fixture("e1.json");
    let out = run(&["solve", "--instance", e1.to_str().unwrap(), "--tau", "1.2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).is_empty());
}

#[test]
fn unknown_flags_are_rejected() {
    let e1 = fixture("e1.json");
    let out = run(&["solve", "--instance", e1.to_str().unwrap(), "--bogus"]);
    assert!(!out.status.success());
    let out = run(&["baseline", "--instance", e1.to_str().unwrap(), "--method", "xx"]);
    assert!(!out.status.success());
}

#[test]
fn non_convergence_has_its_own_exit_code() {
    let e1 = fixture("e1.json");
    let out = run(&["solve", "--instance", e1.to_str().unwrap(), "--max-iter", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("did not converge"));
}
