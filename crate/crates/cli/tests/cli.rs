use std::path::{Path, PathBuf};

use entropic_cli::run_with;
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("entropic").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write(dir: &TempDir, name: &str, v: &Value) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn three_state(dir: &TempDir) -> PathBuf {
    write(dir, "market.json", &json!({"q": [1.0, 1.0], "Q": [[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]}))
}

#[test]
fn valid_market_has_no_violations() {
    let dir = TempDir::new().unwrap();
    let m = three_state(&dir);
    let (code, out, _) = run(&["validate", s(&m)]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["kind"], "market");
    assert_eq!(v["violations"], json!([]));
}

#[test]
fn short_weights_are_located() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "m.json", &json!({"q": [1.0], "Q": [[0.5], [1.5]], "weights": [0.5, 0.49]}));
    let (code, out, _) = run(&["validate", s(&m)]);
    assert_eq!(code, 1);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["violations"][0]["path"], "/weights");
}

#[test]
fn asymmetric_operator_reports_its_asymmetry() {
    let dir = TempDir::new().unwrap();
    let op = write(&dir, "op.json", &json!({"re": [[1.0, 0.5], [0.500001, -1.0]]}));
    let (code, out, _) = run(&["validate", s(&op)]);
    assert_eq!(code, 1);
    let v: Value = serde_json::from_str(&out).unwrap();
    let msg = v["violations"][0]["message"].as_str().unwrap();
    assert!(msg.contains("not Hermitian") && msg.contains("1.000e-6"), "{msg}");
}

#[test]
fn malformed_json_and_unknown_study_are_validation_errors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{ not json").unwrap();
    assert_eq!(run(&["calibrate", "--market", s(&p)]).0, 1);
    assert_eq!(run(&["study", "no-such-study"]).0, 1);
    assert_eq!(run(&["calibrate", "--market", "/no/such/file.json"]).0, 1);
}

#[test]
fn calibrate_three_state() {
    let dir = TempDir::new().unwrap();
    let m = three_state(&dir);
    let (code, out, err) = run(&["calibrate", "--market", s(&m)]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v["r"].as_f64().unwrap().abs() < 1e-12);
    for key in ["phi", "gamma", "residual_norm", "iterations"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn arbitrage_market_is_a_solver_failure_with_report() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "m.json", &json!({"q": [1.0, 1.0], "Q": [[1.0, 2.0], [1.0, 3.0]]}));
    let out = dir.path().join("cal.json");
    let (code, _, err) = run(&["calibrate", "--market", s(&m), "--out", s(&out)]);
    assert_eq!(code, 2, "{err}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cal.meta.json")).unwrap()).unwrap();
    assert!(report["error"].as_str().unwrap().contains("infeasible"));
}

#[test]
fn price_and_order_book_of_the_three_state_call() {
    let dir = TempDir::new().unwrap();
    let m = three_state(&dir);
    let (code, out, err) = run(&["price", "--market", s(&m), "--payoff", "call:1", "--alpha", "1"]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let p = v["p"].as_f64().unwrap();
    assert!((p + ((1.0 + 2.0 * (-0.5f64).exp()) / 3.0).ln()).abs() < 1e-9);
    assert!((v["delta"][1].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let (code, out, _) = run(&["order-book", "--market", s(&m), "--payoff", "call:1@1"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!((v["mid"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((v["half_spread"].as_f64().unwrap() - 1.0 / 18.0).abs() < 1e-12);
}

#[test]
fn price_grid_table() {
    let dir = TempDir::new().unwrap();
    let m = three_state(&dir);
    let out = dir.path().join("grid.csv");
    let args = ["price", "--market", s(&m), "--payoff", "call", "--strike-grid", "0:2:3", "--lambda-grid", "-1:1:3", "--out", s(&out)];
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strike,lambda,price,delta_0,delta_1");
    assert_eq!(lines.len(), 10);
    assert!(dir.path().join("grid.meta.json").exists());
}

#[test]
fn model_risk_report_fields() {
    let dir = TempDir::new().unwrap();
    let m = three_state(&dir);
    let w = write(&dir, "w.json", &json!([0.0, 0.0, 1.0]));
    let (code, out, err) = run(&["model-risk", "--market", s(&m), "--payoff", "call:1", "--direction", s(&w)]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let (dp, fd) = (v["dp"].as_f64().unwrap(), v["fd_check"]["dp"].as_f64().unwrap());
    assert!((dp - fd).abs() < 1e-6);
    assert_eq!(v["dphi"].as_array().unwrap().len(), 2);
}

#[test]
fn risk_metric_at_zero_is_the_mean() {
    let dir = TempDir::new().unwrap();
    let m = three_state(&dir);
    let (code, out, _) = run(&["risk-metric", "--market", s(&m), "--payoff", "forward:0", "--alpha", "0"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!((v["eam"].as_f64().unwrap() - 1.0).abs() < 1e-15);
    let (_, out, _) = run(&["risk-metric", "--market", s(&m), "--payoff", "forward:0", "--alpha", "inf"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["eam"].as_f64().unwrap(), 0.0);
}

#[test]
fn two_state_quantum_matches_closed_form() {
    let (code, out, err) = run(&["quantum", "--strike", "0"]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!((v["p"].as_f64().unwrap() - v["closed_form"]["p"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn operator_market_from_files() {
    let dir = TempDir::new().unwrap();
    let market = write(
        &dir,
        "qm.json",
        &json!({"q": [1.0, 0.0], "finals": [{"re": [[2.0, 0.0], [0.0, 0.0]]}, {"re": [[0.0, 1.0], [1.0, 0.0]]}]}),
    );
    let payoff = write(&dir, "p.json", &json!({"re": [[0.5, 0.5], [0.5, 0.5]]}));
    let (code, out, err) = run(&["quantum", "--market", s(&market), "--payoff", s(&payoff)]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let (bid, mid, offer) = (v["p"].as_f64().unwrap(), v["mid"].as_f64().unwrap(), v["offer"].as_f64().unwrap());
    assert!(bid <= mid + 1e-12 && mid <= offer + 1e-12);
}

#[test]
fn xva_scenario() {
    let dir = TempDir::new().unwrap();
    let sc = write(&dir, "sc.json", &json!({"P": [0.0, 1.0], "c1": 2.0, "c2": 2.0, "alphas": [1.0, 1.0]}));
    let out = dir.path().join("xva.csv");
    let (code, _, err) = run(&["xva", "--scenario", s(&sc), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("xva.meta.json")).unwrap()).unwrap();
    let (p1, p2) = (meta["thresholds"]["p1"].as_f64().unwrap(), meta["thresholds"]["p2"].as_f64().unwrap());
    assert!((p1 + ((1.0 + (-1f64).exp()) / 2.0).ln()).abs() < 1e-9);
    assert!((p2 - ((1.0 + 1f64.exp()) / 2.0).ln()).abs() < 1e-9);
    assert_eq!(meta["default_stats"]["buyer_default"], json!([0.0, 0.0]));
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("price,buyer,seller\n"));
}

#[test]
fn complete_pde_surface() {
    let dir = TempDir::new().unwrap();
    let model = write(
        &dir,
        "bs.json",
        &json!({"model": "complete", "nu": 0.04, "strike": 100.0, "q0": 100.0, "q_nodes": 101, "time_steps": 50}),
    );
    let out = dir.path().join("bs.csv");
    let (code, _, err) = run(&["pde", "--model", s(&model), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bs.meta.json")).unwrap()).unwrap();
    assert!((meta["price"].as_f64().unwrap() - 7.9656).abs() < 0.05);
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("t,q,p,delta\n"));
}

#[test]
fn studies_are_deterministic_and_write_sidecars() {
    let dir = TempDir::new().unwrap();
    for study in ["funding-rate-normal", "funding-rate-binomial", "quantum"] {
        let (a, b) = (dir.path().join(format!("{study}-a.csv")), dir.path().join(format!("{study}-b.csv")));
        assert_eq!(run(&["study", study, "--out", s(&a)]).0, 0);
        assert_eq!(run(&["study", study, "--out", s(&b)]).0, 0);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{study}");
        let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{study}-a.meta.json"))).unwrap()).unwrap();
        assert!(meta["solver"]["max_residual"].as_f64().unwrap() < 1e-8, "{study}");
    }
}

#[test]
fn normal_funding_rate_gravitates_to_the_drift_of_the_underlying() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("f.csv");
    assert_eq!(run(&["study", "funding-rate-normal", "--sweep", "0.001:0.3:50", "--out", s(&out)]).0, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    for r in &rows {
        let (mu1, sigma1, sigma2, rate) = (r[0], r[1], r[2], r[3]);
        assert!(rate >= mu1.min(0.0) - 1e-12 && rate <= mu1.max(0.0) + 1e-12);
        if sigma1 > 0.0 && sigma2 == 0.001 {
            assert!(rate.abs() < 1e-3 * (1.0 + mu1.abs()), "{r:?}");
        }
    }
}

#[test]
fn json_format_tables() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("q.json");
    assert_eq!(run(&["study", "quantum", "--strike-grid", "-1:1:5", "--format", "json", "--out", s(&out)]).0, 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 5);
    assert_eq!(v[0]["k"], json!(-1.0));
    assert!(dir.path().join("q.meta.json").exists());
}
