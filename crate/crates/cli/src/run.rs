//! Command implementations: assemble core types from configuration, run,
//! and emit reports and plot tables.

use crate::config::RunConfig;
use crate::data::load_data;
use crate::report::{csv_table, fmt_f64, to_json_bytes, OutputDir};
use pkcal_core::bayes::{
    credible_region, multichain_split_rhat, sample_posterior, McmcChain, PosteriorSpec,
    PosteriorVariant,
};
use pkcal_core::calibrate::{
    fit_ko_mode, fit_l2, fit_pk, gcv_select, profile_objective, CalibrationProblem,
    CalibrationResult, LambdaPolicy,
};
use pkcal_core::domain::build_quadrature;
use pkcal_core::study::{
    mc_study, rate_study, scenario, RateLambda, RateSettings, StudyMethod, StudySettings,
};
use pkcal_core::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

fn config_hash(config: &RunConfig) -> String {
    let canonical = toml::to_string(config).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

fn provenance(config: &RunConfig, command: &str, detail: &str) -> Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "method": detail,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "config": serde_json::to_value(config).unwrap_or(Value::Null),
    })
}

fn build_problem(config: &RunConfig, data_path: &Path) -> Result<CalibrationProblem> {
    let domain = config.domain_spec()?;
    let (x, y) = load_data(data_path, domain.dim())?;
    let kernel = config.kernel_spec()?;
    let rule = Arc::new(build_quadrature(
        &domain,
        config.quadrature_kind(),
        config.quadrature_level(),
    )?);
    let model = config.build_model()?;
    let mut problem = CalibrationProblem::new(x, y, model, kernel, domain, rule);
    problem.lambda = config.lambda_policy();
    problem.optimizer = config.optimizer_settings();
    if let Some(j) = config.jitter_rel {
        problem.jitter_rel = j;
    }
    problem.seed = config.seed;
    Ok(problem)
}

fn result_to_value(result: &CalibrationResult) -> Value {
    serde_json::to_value(result).unwrap_or(Value::Null)
}

/// Objective slices through theta-hat, one block per coordinate.
fn profile_curve(
    problem: &CalibrationProblem,
    result: &CalibrationResult,
) -> Result<Vec<Vec<String>>> {
    let bounds = problem.model.theta_bounds();
    let mut rows = Vec::new();
    for (coord, &(a, b)) in bounds.iter().enumerate() {
        for i in 0..41 {
            let mut theta = result.theta_hat.clone();
            theta[coord] = a + (b - a) * i as f64 / 40.0;
            let (j, _) = profile_objective(problem, &theta, result.lambda_used)?;
            rows.push(vec![
                coord.to_string(),
                fmt_f64(theta[coord]),
                fmt_f64(j),
            ]);
        }
    }
    Ok(rows)
}

fn gcv_rows(result: &CalibrationResult) -> Vec<Vec<String>> {
    result
        .gcv_trace
        .iter()
        .map(|&(l, s)| vec![fmt_f64(l), fmt_f64(s)])
        .collect()
}

pub fn run_fit(
    config: &RunConfig,
    data_path: &Path,
    out: &Path,
    method_flag: Option<&str>,
) -> Result<()> {
    let method = match method_flag.or(config.method.as_deref()) {
        None => "pk".to_string(),
        Some(m) if ["pk", "l2", "ko"].contains(&m) => m.to_string(),
        Some(other) => {
            return Err(Error::Validation(format!(
                "fit method must be pk, l2, or ko, got '{other}'"
            )))
        }
    };
    let mut problem = build_problem(config, data_path)?;
    if method == "ko" {
        problem.lambda = LambdaPolicy::Fixed {
            value: config.lambda.ko_lambda,
        };
    }
    let result = match method.as_str() {
        "pk" => fit_pk(&problem)?,
        "l2" => fit_l2(&problem)?,
        _ => fit_ko_mode(&problem)?,
    };

    let mut report = provenance(config, "fit", &method);
    report["result"] = result_to_value(&result);

    let mut dir = OutputDir::new(out)?;
    dir.stage("report.json", &to_json_bytes(&report)?)?;
    if method == "pk" {
        let rows = profile_curve(&problem, &result)?;
        dir.stage(
            "profile_curve.csv",
            &csv_table(&["coord", "theta", "objective"], &rows),
        )?;
    }
    if !result.gcv_trace.is_empty() {
        dir.stage(
            "gcv_trace.csv",
            &csv_table(&["lambda", "score"], &gcv_rows(&result)),
        )?;
    }
    dir.commit()
}

pub fn run_compare(config: &RunConfig, data_path: &Path, out: &Path) -> Result<()> {
    let problem = build_problem(config, data_path)?;
    let pk = fit_pk(&problem)?;
    let l2 = fit_l2(&problem)?;
    let mut ko_problem = problem.clone();
    ko_problem.lambda = LambdaPolicy::Fixed {
        value: config.lambda.ko_lambda,
    };
    let ko = fit_ko_mode(&ko_problem)?;

    let mut report = provenance(config, "compare", "pk+l2+ko");
    report["results"] = json!({
        "pk": result_to_value(&pk),
        "l2": result_to_value(&l2),
        "ko-mode": result_to_value(&ko),
    });
    report["tabulation"] = json!({
        "theta": {
            "pk": pk.theta_hat,
            "l2": l2.theta_hat,
            "ko-mode": ko.theta_hat,
        },
        "lambda": {
            "pk": pk.lambda_used,
            "l2": l2.lambda_used,
            "ko-mode": ko.lambda_used,
        },
        "sigma2": {
            "pk": pk.sigma2_hat,
            "l2": l2.sigma2_hat,
            "ko-mode": ko.sigma2_hat,
        },
    });

    let mut rows = Vec::new();
    for (name, r) in [("pk", &pk), ("l2", &l2), ("ko-mode", &ko)] {
        let mut row = vec![name.to_string()];
        row.extend(r.theta_hat.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(r.lambda_used));
        row.push(fmt_f64(r.objective));
        rows.push(row);
    }
    let q = problem.model.q();
    let mut header: Vec<String> = vec!["method".into()];
    header.extend((1..=q).map(|i| format!("theta_{i}")));
    header.push("lambda".into());
    header.push("objective".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();

    let mut dir = OutputDir::new(out)?;
    dir.stage("report.json", &to_json_bytes(&report)?)?;
    dir.stage("compare.csv", &csv_table(&header_refs, &rows))?;
    dir.commit()
}

pub fn run_bayes(
    config: &RunConfig,
    data_path: &Path,
    out: &Path,
    variant_flag: &str,
) -> Result<()> {
    let variant = match variant_flag {
        "pk" => PosteriorVariant::Pk,
        "ogp" => PosteriorVariant::Ogp,
        other => {
            return Err(Error::Validation(format!(
                "bayes variant must be pk or ogp, got '{other}'"
            )))
        }
    };
    let problem = build_problem(config, data_path)?;
    // Smoothing parameter: fixed from config, or GCV at the two-step pilot.
    let (lambda, pilot_theta) = match &problem.lambda {
        LambdaPolicy::Fixed { value } => (*value, None),
        LambdaPolicy::Gcv { grid } => {
            let pilot = fit_l2(&problem)?;
            let (l, _) = gcv_select(&problem, &pilot.theta_hat, grid)?;
            (l, Some(pilot.theta_hat))
        }
    };
    let mut spec = PosteriorSpec::new(variant, lambda, problem.kernel.clone());
    spec.ogp_literal = config.mcmc.ogp_literal;
    spec.mcmc = config.mcmc_settings();
    spec.seed = config.seed;
    let chains = sample_posterior(&spec, &problem)?;
    let region = credible_region(&chains, config.mcmc.credible_level)?;
    let rhat = multichain_split_rhat(&chains);

    let mut report = provenance(config, "bayes", variant_flag);
    report["lambda_used"] = json!(lambda);
    report["pilot_theta"] = json!(pilot_theta);
    report["credible"] = serde_json::to_value(&region).unwrap_or(Value::Null);
    report["split_rhat"] = json!(rhat);
    report["chains"] = json!(chains
        .iter()
        .map(|c| json!({
            "acceptance_rate": c.acceptance_rate,
            "split_rhat": c.split_rhat,
            "ess": c.ess,
            "draws": c.samples.len(),
        }))
        .collect::<Vec<_>>());

    let mut dir = OutputDir::new(out)?;
    dir.stage("report.json", &to_json_bytes(&report)?)?;
    for (k, chain) in chains.iter().enumerate() {
        dir.stage(&format!("chain_{k}.csv"), &chain_table(chain))?;
    }
    dir.commit()
}

/// One draw per line: theta coordinates then the log density.
fn chain_table(chain: &McmcChain) -> Vec<u8> {
    let q = chain.samples.first().map_or(0, |s| s.len());
    let mut header: Vec<String> = (1..=q).map(|i| format!("theta_{i}")).collect();
    header.push("log_density".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = chain
        .samples
        .iter()
        .zip(&chain.log_density)
        .map(|(s, &lp)| {
            let mut row: Vec<String> = s.iter().map(|&v| fmt_f64(v)).collect();
            row.push(fmt_f64(lp));
            row
        })
        .collect();
    csv_table(&header_refs, &rows)
}

fn study_methods(config: &RunConfig) -> Result<Vec<StudyMethod>> {
    config
        .study
        .methods
        .iter()
        .map(|m| match m.as_str() {
            "pk" => Ok(StudyMethod::Pk),
            "l2" => Ok(StudyMethod::L2),
            "ko-mode" => Ok(StudyMethod::KoMode),
            "pk-bayes" => Ok(StudyMethod::PkBayes),
            "ogp-bayes" => Ok(StudyMethod::OgpBayes),
            other => Err(Error::Validation(format!("unknown study method '{other}'"))),
        })
        .collect()
}

fn study_scenario(config: &RunConfig) -> Result<pkcal_core::study::ScenarioSpec> {
    let mut sc = scenario(&config.study.scenario)?;
    sc.seed = config.seed;
    if let Some(n) = config.study.n {
        sc.n = n;
    }
    if let Some(r) = config.study.replications {
        sc.replications = r;
    }
    if let Some(s) = config.study.sigma {
        sc.sigma = s;
    }
    Ok(sc)
}

fn study_settings(config: &RunConfig) -> StudySettings {
    StudySettings {
        lambda: config.lambda_policy(),
        ko_lambda: config.lambda.ko_lambda,
        ko_sweep: config.study.ko_sweep.clone(),
        optimizer: config.optimizer_settings(),
        mcmc: config.mcmc_settings(),
        level: config.mcmc.credible_level,
        quad_level: config.quadrature_level(),
    }
}

/// Serialize, dropping wall-clock fields so reports stay bit-reproducible.
fn strip_runtime(value: &mut Value) {
    if let Some(obj) = value.as_object_mut() {
        obj.remove("runtime_seconds");
    }
}

pub fn run_mc_study(config: &RunConfig, out: &Path) -> Result<()> {
    let sc = study_scenario(config)?;
    let methods = study_methods(config)?;
    let settings = study_settings(config);
    let report_data = mc_study(&sc, &methods, &settings)?;
    eprintln!(
        "mc-study finished in {:.1}s ({} replications x {} methods)",
        report_data.runtime_seconds,
        report_data.replications,
        methods.len()
    );

    let mut study_value = serde_json::to_value(&report_data).unwrap_or(Value::Null);
    strip_runtime(&mut study_value);
    // The per-replication table goes to its own artifact.
    let per_rep = study_value
        .as_object_mut()
        .and_then(|o| o.remove("per_rep"))
        .unwrap_or(Value::Null);

    let mut report = provenance(config, "mc-study", &config.study.scenario);
    report["study"] = study_value;

    let q = report_data.theta_star.len();
    let mut header: Vec<String> = vec!["method".into(), "rep".into(), "lambda".into()];
    header.extend((1..=q).map(|i| format!("theta_{i}")));
    header.extend((1..=q).map(|i| format!("covered_{i}")));
    header.push("error".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = per_rep
        .as_array()
        .map(|arr| {
            arr.iter()
                .map(|r| {
                    let mut row = vec![
                        r["method"].as_str().unwrap_or("").to_string(),
                        r["rep"].to_string(),
                        r["lambda"]
                            .as_f64()
                            .map(fmt_f64)
                            .unwrap_or_default(),
                    ];
                    let theta = r["theta"].as_array().cloned().unwrap_or_default();
                    for i in 0..q {
                        row.push(
                            theta
                                .get(i)
                                .and_then(|v| v.as_f64())
                                .map(fmt_f64)
                                .unwrap_or_default(),
                        );
                    }
                    let covered = r["covered"].as_array().cloned().unwrap_or_default();
                    for i in 0..q {
                        row.push(
                            covered
                                .get(i)
                                .and_then(|v| v.as_bool())
                                .map(|b| b.to_string())
                                .unwrap_or_default(),
                        );
                    }
                    row.push(
                        r["error"]
                            .as_str()
                            .map(|s| s.replace([',', '\n'], ";"))
                            .unwrap_or_default(),
                    );
                    row
                })
                .collect()
        })
        .unwrap_or_default();

    let mut dir = OutputDir::new(out)?;
    dir.stage("report.json", &to_json_bytes(&report)?)?;
    dir.stage("study_reps.csv", &csv_table(&header_refs, &rows))?;
    dir.commit()
}

pub fn run_rate_study(config: &RunConfig, out: &Path) -> Result<()> {
    let sc = study_scenario(config)?;
    let settings = RateSettings {
        lambda: match config.study.rate_lambda.as_str() {
            "schedule" => RateLambda::Schedule {
                c: config.study.rate_schedule_c,
                m: config.study.rate_schedule_m,
            },
            _ => RateLambda::Gcv,
        },
        optimizer: config.optimizer_settings(),
        quad_level: config.quadrature_level(),
    };
    let report_data = rate_study(
        &sc,
        &config.study.n_grid,
        config.study.rate_replications,
        &settings,
    )?;
    eprintln!(
        "rate-study finished in {:.1}s (slope {:.3})",
        report_data.runtime_seconds, report_data.slope
    );

    let mut rate_value = serde_json::to_value(&report_data).unwrap_or(Value::Null);
    strip_runtime(&mut rate_value);
    let per_rep = rate_value
        .as_object_mut()
        .and_then(|o| o.remove("per_rep"))
        .unwrap_or(Value::Null);

    let mut report = provenance(config, "rate-study", &config.study.scenario);
    report["rate"] = rate_value;

    let rows: Vec<Vec<String>> = per_rep
        .as_array()
        .map(|arr| {
            arr.iter()
                .map(|r| {
                    let t = r.as_array().cloned().unwrap_or_default();
                    vec![
                        t.first().map(|v| v.to_string()).unwrap_or_default(),
                        t.get(1).map(|v| v.to_string()).unwrap_or_default(),
                        t.get(2)
                            .and_then(|v| v.as_f64())
                            .map(fmt_f64)
                            .unwrap_or_default(),
                    ]
                })
                .collect()
        })
        .unwrap_or_default();

    let mut dir = OutputDir::new(out)?;
    dir.stage("report.json", &to_json_bytes(&report)?)?;
    dir.stage("rate_reps.csv", &csv_table(&["n", "rep", "l2_error"], &rows))?;
    dir.commit()
}
