//! The page's three operations, run natively.

use drpo_web::*;
use serde_json::Value;

#[test]
fn describe_reports_exact_canonical_values() {
    let v: Value = serde_json::from_str(&describe_environment_json("canonical", 0).unwrap()).unwrap();
    assert!((v["reference_preference"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!((v["target_preference"].as_f64().unwrap() - 0.65).abs() < 1e-12);
    assert_eq!(v["bt_representable"], Value::Bool(true));
    let v: Value = serde_json::from_str(&describe_environment_json("intransitive", 0).unwrap()).unwrap();
    assert!(v["bt_floor"].as_f64().unwrap() >= 0.03);
}

#[test]
fn race_shows_dr_bias_only_when_both_nuisances_are_wrong() {
    let rows: Vec<Value> = serde_json::from_str(&estimator_race_json("adversarial", 400, 200, 1).unwrap()).unwrap();
    assert_eq!(rows.len(), 12);
    let dr = |variant: &str| rows.iter().find(|r| r["estimator"] == "dr" && r["variant"] == variant).unwrap().clone();
    let bw = dr("both_wrong");
    let bc = dr("both_correct");
    assert!(bw["bias"].as_f64().unwrap().abs() > 5.0 * bc["bias"].as_f64().unwrap().abs());
    assert!(bw["mse"].as_f64().unwrap() > bc["mse"].as_f64().unwrap());
}

#[test]
fn trajectory_improves_on_the_reference() {
    let pts: Vec<Value> = serde_json::from_str(&train_trajectory_json("canonical", 2000, 0.04, 4, 0).unwrap()).unwrap();
    assert!(pts.len() > 10);
    let last = pts.last().unwrap()["preference"].as_f64().unwrap();
    assert!(last >= 0.64, "{last}");
}

#[test]
fn bad_requests_are_errors_not_panics() {
    assert!(describe_environment_json("nope", 0).is_err());
    assert!(estimator_race_json("canonical", 1, 10, 0).is_err());
    assert!(estimator_race_json("canonical", 100, MAX_WORK + 1, 0).is_err());
    assert!(train_trajectory_json("canonical", 100, -1.0, 1, 0).is_err());
}

#[test]
fn page_calls_every_exported_operation() {
    let page = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/www/index.html")).unwrap();
    for name in ["describe_environment", "estimator_race", "train_trajectory", "./pkg/drpo_web.js"] {
        assert!(page.contains(name), "{name}");
    }
}
