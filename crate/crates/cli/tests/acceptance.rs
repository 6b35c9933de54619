//! Verification gate, CLI side: every command with a fixed seed produces
//! bit-identical artifacts across two consecutive runs.

use std::path::{Path, PathBuf};
use std::process::Command;

const PKCAL: &str = env!("CARGO_BIN_EXE_pkcal");

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run_into(dir: &Path, args: &[&str]) {
    let out = Command::new(PKCAL)
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

fn assert_identical_runs(label: &str, args: &[&str]) {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_into(&a, args);
    run_into(&b, args);
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(
        fa.len(),
        fb.len(),
        "{label}: different artifact sets"
    );
    for ((name_a, bytes_a), (name_b, bytes_b)) in fa.iter().zip(&fb) {
        assert_eq!(name_a, name_b, "{label}: artifact names differ");
        assert!(
            bytes_a == bytes_b,
            "{label}: artifact {name_a} differs between runs"
        );
    }
    println!("criterion 11 ({label}): bit-identical ({} artifacts)", fa.len());
}

#[test]
fn criterion_11_reports_are_bit_identical_across_runs() {
    let config = repo_path("configs/fit_s2.toml");
    let config = config.to_str().unwrap();
    let data = repo_path("data/sample_s2.csv");
    let data = data.to_str().unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let study_config = tmp.path().join("study.toml");
    std::fs::write(
        &study_config,
        r#"
seed = 13
[study]
scenario = "s1"
n = 25
replications = 3
methods = ["pk", "l2"]
ko_sweep = []
n_grid = [20, 40, 80]
rate_replications = 2
"#,
    )
    .unwrap();
    let study_config = study_config.to_str().unwrap();
    let bayes_config = tmp.path().join("bayes.toml");
    std::fs::write(
        &bayes_config,
        r#"
seed = 13
[domain]
bounds = [[0.0, 1.0]]
[kernel]
family = "matern-5/2"
lengthscales = [0.25]
variance = 1.0
[model]
kind = "builtin"
name = "linear-features"
degree = 1
theta_bounds = [[-5.0, 5.0], [-5.0, 5.0]]
[mcmc]
chains = 2
burn_in = 200
samples = 300
"#,
    )
    .unwrap();
    let bayes_config = bayes_config.to_str().unwrap();

    assert_identical_runs(
        "fit",
        &["fit", "--method", "pk", "--config", config, "--data", data, "--seed", "21"],
    );
    assert_identical_runs(
        "compare",
        &["compare", "--config", config, "--data", data, "--seed", "21"],
    );
    assert_identical_runs(
        "bayes",
        &["bayes", "--variant", "pk", "--config", bayes_config, "--data", data],
    );
    assert_identical_runs("mc-study", &["mc-study", "--config", study_config]);
    assert_identical_runs("rate-study", &["rate-study", "--config", study_config]);
    println!("criterion 11 (determinism): PASS - all five commands bit-identical");
}
