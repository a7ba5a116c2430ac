//! End-to-end runs of the `drpo-lab` binary: outputs, exit codes, seed
//! handling and manifests.

use std::path::Path;
use std::process::{Command, Output};

use drpo_core::experiments::Manifest;
use drpo_core::Document;

fn lab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drpo-lab"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("DRPO_LAB_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn pipeline_from_environment_to_trained_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = lab(&["gen-env", "--generator", "canonical"], &d.join("env"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p: f64 = value(&stdout(&o), "target_total_preference").parse().unwrap();
    assert!((p - 0.65).abs() < 1e-12);
    assert_eq!(value(&stdout(&o), "bt_representable"), "true");
    let bed = d.join("env/test_bed.json").display().to_string();

    let o = lab(&["simulate", "--env", &bed, "--n", "4000", "--seed", "1"], &d.join("sim"));
    assert!(o.status.success());
    assert_eq!(value(&stdout(&o), "tuples"), "4000");
    let csv = std::fs::read_to_string(d.join("sim/data.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("prompt,y1,y2,z"));
    assert_eq!(csv.lines().count(), 4001);
    let data = d.join("sim/data.json").display().to_string();

    let policy = d.join("env/target_policy.json").display().to_string();
    let o = lab(&["evaluate", "--env", &bed, "--policy", &policy, "--data", &data], &d.join("eval"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("eval/estimate.json").exists() && d.join("eval/estimate.csv").exists());

    let o = lab(&["train", "--method", "drpo", "--env", &bed, "--data", &data], &d.join("train"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p: f64 = value(&stdout(&o), "total_preference").parse().unwrap();
    assert!(p > 0.6, "{p}");
    let trained = d.join("train/policy.json").display().to_string();
    let o = lab(&["oracle", "--env", &bed, "--policy", &trained], &d.join("oracle"));
    assert!(o.status.success());
    assert!(d.join("oracle/oracle.json").exists());
}

#[test]
fn every_output_is_hashed_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&["gen-env", "--generator", "intransitive", "--seed", "9"], tmp.path());
    assert!(o.status.success());
    assert_eq!(value(&stdout(&o), "bt_representable"), "false");
    let m = Manifest::read_file(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(m.subcommand, "gen-env");
    assert_eq!(m.seed, 9);
    assert!(!m.seed_from_env);
    assert_eq!(m.outputs.len(), 4);
    for (name, hash) in &m.outputs {
        let bytes = std::fs::read(tmp.path().join(name)).unwrap();
        assert_eq!(&drpo_core::experiments::sha256_hex(&bytes), hash);
    }
}

#[test]
fn seed_environment_variable_is_used_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_drpo-lab"))
        .args(["gen-env", "--generator", "bt-random", "--out-dir"])
        .arg(tmp.path())
        .env("DRPO_LAB_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m = Manifest::read_file(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(m.seed, 17);
    assert!(m.seed_from_env);
    // The flag wins over the variable.
    let o = Command::new(env!("CARGO_BIN_EXE_drpo-lab"))
        .args(["gen-env", "--seed", "3", "--out-dir"])
        .arg(tmp.path())
        .env("DRPO_LAB_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m = Manifest::read_file(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!((m.seed, m.seed_from_env), (3, false));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["no-such-command"],
        vec!["gen-env", "--generator", "nonsense"],
        vec!["sweep"],
        vec!["sweep", "--preset", "robustness"],
        vec!["compare", "--preset", "unknown"],
        vec!["simulate", "--env", "/nonexistent/env.json"],
        vec!["selftest", "--fault", "no-such-fault"],
    ] {
        let o = lab(&args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn oversized_environments_are_refused_with_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&["gen-env", "--generator", "bt-random", "--prompts", "500", "--responses", "2000"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn a_manifest_from_another_subcommand_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(lab(&["gen-env"], tmp.path()).status.success());
    let m = tmp.path().join("manifest.json").display().to_string();
    let o = lab(&["simulate", "--config", &m], &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_passes_and_the_injected_fault_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(&["selftest"], tmp.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let xml = std::fs::read_to_string(tmp.path().join("selftest.xml")).unwrap();
    assert!(xml.matches("<testcase").count() >= 15);
    assert!(!xml.contains("<failure"));

    let o = lab(&["selftest", "--fault", "flip-sign-augmentation"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("FAIL double_robustness"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("FAIL")).count(), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("double_robustness"));
}

#[test]
fn sweep_csv_is_plain_and_replays_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"env": {"source": "builtin", "generator": "canonical"}, "sample_sizes": [20, 40], "replications": 10}"#).unwrap();
    let a = tmp.path().join("a");
    assert!(lab(&["sweep", "--config", cfg.to_str().unwrap(), "--threads", "3"], &a).status.success());
    let csv = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(!csv.contains(' '));
    let b = tmp.path().join("b");
    let manifest = a.join("manifest.json").display().to_string();
    assert!(lab(&["sweep", "--config", &manifest], &b).status.success());
    for f in ["results.csv", "report.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
