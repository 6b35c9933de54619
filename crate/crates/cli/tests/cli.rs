//! End-to-end behavior of the `pkcal` binary: reports, exit categories,
//! and output atomicity.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const PKCAL: &str = env!("CARGO_BIN_EXE_pkcal");

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run(args: &[&str]) -> Output {
    Command::new(PKCAL)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_fit(config: &Path, data: &Path, out: &Path) -> Output {
    run(&[
        "fit",
        "--method",
        "pk",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn fit_matches_committed_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_fit(
        &repo_path("configs/fit_s2.toml"),
        &repo_path("data/sample_s2.csv"),
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap())
            .unwrap();
    let golden: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_fit_report.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let got = report["result"]["theta_hat"].as_array().unwrap();
    let want = golden["result"]["theta_hat"].as_array().unwrap();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        let (g, w) = (g.as_f64().unwrap(), w.as_f64().unwrap());
        assert!((g - w).abs() <= 1e-8, "theta {g} vs golden {w}");
    }
    // Reports carry their provenance.
    assert!(report["config_hash"].as_str().unwrap().starts_with("sha256:"));
    assert_eq!(report["config"]["seed"], golden["config"]["seed"]);
    assert!(tmp.path().join("profile_curve.csv").exists());
    assert!(tmp.path().join("gcv_trace.csv").exists());
}

#[test]
fn missing_data_file_exits_3_without_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("results");
    let out = run_fit(
        &repo_path("configs/fit_s2.toml"),
        &tmp.path().join("nope.csv"),
        &out_dir,
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let err: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error_category"], "data");
    // Nothing was created.
    assert!(!out_dir.exists() || std::fs::read_dir(&out_dir).unwrap().next().is_none());
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "[lambda]\npolicy = \"fixed\"\nvalue = -3.0\n").unwrap();
    let out = run_fit(&config, &repo_path("data/sample_s2.csv"), tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda.value"), "{stderr}");
}

#[test]
fn unknown_config_field_names_field_and_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("typo.toml");
    std::fs::write(&config, "[kernel]\nvarianse = 1.0\n").unwrap();
    let out = run_fit(&config, &repo_path("data/sample_s2.csv"), tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("varianse") && stderr.contains("variance"), "{stderr}");
}

#[test]
fn malformed_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bad.csv");
    std::fs::write(&data, "x_1,y\n0.1,hello\n").unwrap();
    let out = run_fit(&repo_path("configs/fit_s2.toml"), &data, tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not a number"), "{stderr}");
}

#[test]
fn wrong_header_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bad.csv");
    std::fs::write(&data, "a,b\n0.1,0.2\n").unwrap();
    let out = run_fit(&repo_path("configs/fit_s2.toml"), &data, tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn design_point_outside_domain_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("outside.csv");
    std::fs::write(&data, "x_1,y\n0.5,1.0\n1.5,2.0\n0.2,0.9\n0.8,2.2\n").unwrap();
    let out = run_fit(&repo_path("configs/fit_s2.toml"), &data, tmp.path());
    // The domain check happens at problem validation.
    assert!(!out.status.success());
}

#[test]
fn compare_tabulates_three_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "compare",
        "--config",
        repo_path("configs/fit_s2.toml").to_str().unwrap(),
        "--data",
        repo_path("data/sample_s2.csv").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap())
            .unwrap();
    for method in ["pk", "l2", "ko-mode"] {
        assert!(report["results"][method]["theta_hat"].is_array(), "{method}");
    }
    let compare = std::fs::read_to_string(tmp.path().join("compare.csv")).unwrap();
    assert_eq!(compare.lines().count(), 4);
}

#[test]
fn mc_study_smoke_accounts_all_replications() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("study.toml");
    std::fs::write(
        &config,
        r#"
seed = 5
[study]
scenario = "s1"
n = 25
replications = 2
methods = ["pk"]
ko_sweep = []
"#,
    )
    .unwrap();
    let out = run(&[
        "mc-study",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("res").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("res/report.json")).unwrap(),
    )
    .unwrap();
    let m = &report["study"]["methods"][0];
    assert_eq!(
        m["successes"].as_u64().unwrap() + m["failures"].as_u64().unwrap(),
        2
    );
    let reps = std::fs::read_to_string(tmp.path().join("res/study_reps.csv")).unwrap();
    assert_eq!(reps.lines().count(), 3); // header + 2 replications
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit",
        "--config",
        repo_path("configs/fit_s2.toml").to_str().unwrap(),
        "--data",
        repo_path("data/sample_s2.csv").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--seed",
        "999",
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["seed"], 999);
    assert_eq!(report["config"]["seed"], 999);
}
