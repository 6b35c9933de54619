//! Synthetic scenarios, oracle targets, and Monte-Carlo study harnesses.
//!
//! Three scenarios ship:
//! - `s1`: well-specified linear-features data (the truth is the model at
//!   theta0);
//! - `s2`: the same model plus a smooth discrepancy, so the estimand is the
//!   L2 projection rather than theta0;
//! - `s3`: the nonlinear sine-freq model, whose sensitivity span moves with
//!   theta.
//!
//! The study harness runs replicated fits, compares empirical spread
//! against the plug-in asymptotic covariance, tracks credible-interval
//! coverage, and sweeps the KO smoothing parameter to expose its
//! prior sensitivity next to the projected fit's stability.

use crate::bayes::{
    credible_region, sample_posterior, McmcSettings, PosteriorSpec, PosteriorVariant,
};
use crate::calibrate::{
    asymptotic_covariance, fit_ko_mode, fit_l2, fit_pk, gcv_select, CalibrationProblem,
    LambdaPolicy, Predictor,
};
use crate::domain::{build_quadrature, DomainSpec, QuadratureKind, QuadratureRule};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::model::{builtin, BuiltinConfig, ComputerModel};
use crate::optim::{multi_start, sobol_starts, OptimizerSettings};
use crate::{real_fn, split_seed, Error, RealFn, Result};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Uniform on [-sqrt(3) sigma, sqrt(3) sigma]: same variance, bounded
    /// support.
    Uniform,
}

/// A synthetic data-generating setup.
#[derive(Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub zeta: RealFn,
    pub model: Arc<dyn ComputerModel>,
    pub domain: DomainSpec,
    pub kernel: KernelSpec,
    pub sigma: f64,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    /// Generating parameter, where one exists.
    pub theta0: Vec<f64>,
}

impl ScenarioSpec {
    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::Validation("sigma must be nonnegative".into()));
        }
        if self.replications < 1 || self.n < self.model.q() + 1 {
            return Err(Error::Validation(
                "need replications >= 1 and n >= q + 1".into(),
            ));
        }
        Ok(())
    }
}

pub const SCENARIO_NAMES: [&str; 3] = ["s1", "s2", "s3"];

/// Builds a shipped scenario by name.
pub fn scenario(name: &str) -> Result<ScenarioSpec> {
    let domain = DomainSpec::unit(1);
    let kernel = KernelSpec::isotropic(KernelFamily::Matern52, 1, 0.25, 1.0)?;
    match name {
        "s1" => {
            let model = builtin(
                "linear-features",
                &BuiltinConfig {
                    dim: 1,
                    degree: 1,
                    theta_bounds: Some(vec![(-5.0, 5.0), (-5.0, 5.0)]),
                },
            )?;
            Ok(ScenarioSpec {
                name: "s1".into(),
                zeta: real_fn(|x: &[f64]| 1.0 + 2.0 * x[0]),
                model,
                domain,
                kernel,
                sigma: 0.1,
                n: 50,
                replications: 200,
                seed: 2024,
                noise: NoiseKind::Gaussian,
                theta0: vec![1.0, 2.0],
            })
        }
        "s2" => {
            let model = builtin(
                "linear-features",
                &BuiltinConfig {
                    dim: 1,
                    degree: 1,
                    theta_bounds: Some(vec![(-5.0, 5.0), (-5.0, 5.0)]),
                },
            )?;
            Ok(ScenarioSpec {
                name: "s2".into(),
                zeta: real_fn(|x: &[f64]| {
                    1.0 + 2.0 * x[0] + s2_discrepancy(x[0])
                }),
                model,
                domain,
                kernel,
                sigma: 0.1,
                n: 100,
                replications: 500,
                seed: 2025,
                noise: NoiseKind::Gaussian,
                theta0: vec![1.0, 2.0],
            })
        }
        "s3" => {
            let model = builtin(
                "sine-freq",
                &BuiltinConfig {
                    dim: 1,
                    degree: 0,
                    theta_bounds: Some(vec![(0.5, 4.0), (1.0, 6.0)]),
                },
            )?;
            Ok(ScenarioSpec {
                name: "s3".into(),
                zeta: real_fn(|x: &[f64]| 2.0 * (3.0 * x[0]).sin()),
                model,
                domain,
                kernel,
                sigma: 0.1,
                n: 60,
                replications: 100,
                seed: 2026,
                noise: NoiseKind::Gaussian,
                theta0: vec![2.0, 3.0],
            })
        }
        other => Err(Error::Validation(format!(
            "unknown scenario '{other}'; shipped: {SCENARIO_NAMES:?}"
        ))),
    }
}

/// The s2 model error: smooth, with both a polynomial part the feature
/// span picks up and an oscillatory part it cannot.
pub(crate) fn s2_discrepancy(x: f64) -> f64 {
    0.8 * (2.0 * std::f64::consts::PI * x).sin() + 0.4 * x * x
}

/// Draws one replication's data: uniform design, additive noise;
/// deterministic in (scenario seed, replicate index).
pub fn simulate(sc: &ScenarioSpec, replicate_index: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(sc.seed, replicate_index));
    let d = sc.domain.dim();
    let x: Vec<Vec<f64>> = (0..sc.n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let (a, b) = sc.domain.bounds()[j];
                    rng.random_range(a..b)
                })
                .collect()
        })
        .collect();
    let y: Vec<f64> = x
        .iter()
        .map(|xi| {
            let noise = match sc.noise {
                NoiseKind::Gaussian => {
                    let e: f64 = rng.sample(StandardNormal);
                    sc.sigma * e
                }
                NoiseKind::Uniform => {
                    let h = 3.0_f64.sqrt() * sc.sigma;
                    rng.random_range(-h..h)
                }
            };
            (sc.zeta)(xi) + noise
        })
        .collect();
    (x, y)
}

/// The estimand: the L2 projection of the true process onto the model
/// sheet. Closed form for linear-in-theta models, dense multi-start
/// minimization otherwise; the first-order optimality residual is checked
/// either way.
pub fn oracle_theta_star(sc: &ScenarioSpec, rule: &QuadratureRule) -> Result<Vec<f64>> {
    sc.validate()?;
    let q = sc.model.q();
    let theta = if let Some(features) = sc.model.linear_features() {
        let mut w = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for (qi, x) in rule.nodes().enumerate() {
            let phi = features.eval(x);
            let weight = rule.weights()[qi];
            for a in 0..q {
                b[a] += weight * phi[a] * (sc.zeta)(x);
                for c in 0..q {
                    w[(a, c)] += weight * phi[a] * phi[c];
                }
            }
        }
        let sol = w.lu().solve(&b).ok_or_else(|| {
            Error::Oracle("feature gram is singular; projection target undefined".into())
        })?;
        sol.iter().cloned().collect::<Vec<f64>>()
    } else {
        let bounds = sc.model.theta_bounds().to_vec();
        let zeta = sc.zeta.clone();
        let model = sc.model.clone();
        let mut objective = |theta: &[f64]| -> Result<f64> {
            let mut acc = 0.0;
            for (qi, x) in rule.nodes().enumerate() {
                let d = zeta(x) - model.eval(x, theta)?;
                acc += rule.weights()[qi] * d * d;
            }
            Ok(acc)
        };
        let settings = OptimizerSettings {
            starts: 16.max(8 * q),
            max_iters: 800,
            x_tol: 1e-11,
            f_tol: 1e-14,
        };
        let mut extra = sobol_starts(&bounds, 4);
        extra.push(sc.theta0.clone());
        let (best, _) = multi_start(&mut objective, &bounds, &extra, &settings)
            .map_err(|e| Error::Oracle(format!("projection target search failed: {e}")))?;
        best.best
    };

    // First-order optimality at the returned point.
    let mut resid = vec![0.0; q];
    for (qi, x) in rule.nodes().enumerate() {
        let g = sc.model.grad_theta(x, &theta)?;
        let d = (sc.zeta)(x) - sc.model.eval(x, &theta)?;
        for (a, r) in resid.iter_mut().enumerate() {
            *r += rule.weights()[qi] * d * g[a];
        }
    }
    let norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
    if norm > 1e-6 {
        return Err(Error::Oracle(format!(
            "first-order residual {norm:.3e} at the projection target {theta:?}"
        )));
    }
    Ok(theta)
}

// ---------------------------------------------------------------------------
// Monte-Carlo studies.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyMethod {
    Pk,
    L2,
    KoMode,
    PkBayes,
    OgpBayes,
}

impl StudyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            StudyMethod::Pk => "pk",
            StudyMethod::L2 => "l2",
            StudyMethod::KoMode => "ko-mode",
            StudyMethod::PkBayes => "pk-bayes",
            StudyMethod::OgpBayes => "ogp-bayes",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySettings {
    pub lambda: LambdaPolicy,
    /// Fixed smoothing parameter for single KO runs.
    pub ko_lambda: f64,
    /// Sweep values; both KO and PK run at each, on the same data.
    pub ko_sweep: Vec<f64>,
    pub optimizer: OptimizerSettings,
    pub mcmc: McmcSettings,
    /// Credible level for coverage accounting.
    pub level: f64,
    pub quad_level: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            lambda: LambdaPolicy::default(),
            ko_lambda: 1e-2,
            ko_sweep: vec![1e-4, 1e-2, 1.0],
            optimizer: OptimizerSettings::default(),
            mcmc: McmcSettings::default(),
            level: 0.95,
            quad_level: 32,
        }
    }
}

/// One replication's outcome, for the flat study table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub method: String,
    pub rep: u64,
    /// Sweep lambda when the record belongs to the KO sweep.
    pub lambda: Option<f64>,
    pub theta: Vec<f64>,
    pub covered: Option<Vec<bool>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub successes: usize,
    pub failures: usize,
    pub mean_theta: Vec<f64>,
    pub median_theta: Vec<f64>,
    pub bias: Vec<f64>,
    pub empirical_cov: Vec<Vec<f64>>,
    /// Median Euclidean distance to the projection target.
    pub median_abs_err: f64,
    /// Per-coordinate credible-interval coverage (Bayesian methods).
    pub coverage: Option<Vec<f64>>,
}

/// One sweep lambda with per-coordinate medians for both estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ko_median: Vec<f64>,
    pub pk_median: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: String,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub sigma: f64,
    pub theta_star: Vec<f64>,
    pub asymptotic_cov: Vec<Vec<f64>>,
    pub methods: Vec<MethodSummary>,
    pub ko_sweep: Vec<SweepRow>,
    /// Max pairwise distance of KO medians across the sweep.
    pub ko_drift: f64,
    /// Same measure for the projected fit at the same sweep values.
    pub pk_drift: f64,
    pub per_rep: Vec<RepRecord>,
    pub runtime_seconds: f64,
}

fn make_problem(
    sc: &ScenarioSpec,
    settings: &StudySettings,
    rule: &Arc<QuadratureRule>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    rep: u64,
) -> CalibrationProblem {
    let mut p = CalibrationProblem::new(
        x,
        y,
        sc.model.clone(),
        sc.kernel.clone(),
        sc.domain.clone(),
        rule.clone(),
    );
    p.lambda = settings.lambda.clone();
    p.optimizer = settings.optimizer.clone();
    p.seed = split_seed(sc.seed, rep);
    p
}

fn run_one(
    sc: &ScenarioSpec,
    settings: &StudySettings,
    rule: &Arc<QuadratureRule>,
    method: StudyMethod,
    theta_star: &[f64],
    rep: u64,
    sweep_lambda: Option<f64>,
) -> RepRecord {
    let (x, y) = simulate(sc, rep);
    let mut problem = make_problem(sc, settings, rule, x, y, rep);
    let lambda_tag = sweep_lambda;
    let outcome: Result<(Vec<f64>, Option<Vec<bool>>)> = (|| {
        match method {
            StudyMethod::Pk => {
                if let Some(l) = sweep_lambda {
                    problem.lambda = LambdaPolicy::Fixed { value: l };
                }
                let fit = fit_pk(&problem)?;
                Ok((fit.theta_hat, None))
            }
            StudyMethod::L2 => {
                let fit = fit_l2(&problem)?;
                Ok((fit.theta_hat, None))
            }
            StudyMethod::KoMode => {
                problem.lambda = LambdaPolicy::Fixed {
                    value: sweep_lambda.unwrap_or(settings.ko_lambda),
                };
                let fit = fit_ko_mode(&problem)?;
                Ok((fit.theta_hat, None))
            }
            StudyMethod::PkBayes | StudyMethod::OgpBayes => {
                // Smoothing parameter from GCV at the two-step pilot, as in
                // the frequentist pipeline.
                let pilot = fit_l2(&problem)?;
                let lambda = match &problem.lambda {
                    LambdaPolicy::Fixed { value } => *value,
                    LambdaPolicy::Gcv { grid } => {
                        gcv_select(&problem, &pilot.theta_hat, grid)?.0
                    }
                };
                let variant = if method == StudyMethod::PkBayes {
                    PosteriorVariant::Pk
                } else {
                    PosteriorVariant::Ogp
                };
                let mut spec = PosteriorSpec::new(variant, lambda, problem.kernel.clone());
                spec.mcmc = settings.mcmc.clone();
                spec.seed = split_seed(problem.seed, 0xBA1E5);
                let chains = sample_posterior(&spec, &problem)?;
                let region = credible_region(&chains, settings.level)?;
                let covered: Vec<bool> = region
                    .intervals
                    .iter()
                    .zip(theta_star)
                    .map(|(&(lo, hi), &t)| lo <= t && t <= hi)
                    .collect();
                Ok((region.center, Some(covered)))
            }
        }
    })();
    match outcome {
        Ok((theta, covered)) => RepRecord {
            method: method.name().into(),
            rep,
            lambda: lambda_tag,
            theta,
            covered,
            error: None,
        },
        Err(e) => RepRecord {
            method: method.name().into(),
            rep,
            lambda: lambda_tag,
            theta: Vec::new(),
            covered: None,
            error: Some(e.to_string()),
        },
    }
}

fn summarize(
    method: &str,
    records: &[RepRecord],
    theta_star: &[f64],
    total: usize,
) -> MethodSummary {
    let q = theta_star.len();
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let nf = ok.len().max(1) as f64;
    let mut mean = vec![0.0; q];
    for r in &ok {
        for (m, &t) in mean.iter_mut().zip(&r.theta) {
            *m += t / nf;
        }
    }
    let mut cov = vec![vec![0.0; q]; q];
    if ok.len() > 1 {
        for r in &ok {
            for a in 0..q {
                for b in 0..q {
                    cov[a][b] +=
                        (r.theta[a] - mean[a]) * (r.theta[b] - mean[b]) / (nf - 1.0);
                }
            }
        }
    }
    let median_theta: Vec<f64> = (0..q)
        .map(|d| {
            let mut v: Vec<f64> = ok.iter().map(|r| r.theta[d]).collect();
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                f64::NAN
            } else {
                v[v.len() / 2]
            }
        })
        .collect();
    let mut dists: Vec<f64> = ok
        .iter()
        .map(|r| {
            r.theta
                .iter()
                .zip(theta_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dists.sort_by(f64::total_cmp);
    let median_abs_err = if dists.is_empty() {
        f64::NAN
    } else {
        dists[dists.len() / 2]
    };
    let coverage = if ok.iter().any(|r| r.covered.is_some()) {
        let mut counts = vec![0usize; q];
        let mut denom = 0usize;
        for r in &ok {
            if let Some(c) = &r.covered {
                denom += 1;
                for (k, &hit) in c.iter().enumerate() {
                    counts[k] += usize::from(hit);
                }
            }
        }
        Some(
            counts
                .iter()
                .map(|&c| c as f64 / denom.max(1) as f64)
                .collect(),
        )
    } else {
        None
    };
    MethodSummary {
        method: method.into(),
        successes: ok.len(),
        failures: total - ok.len(),
        bias: mean.iter().zip(theta_star).map(|(m, t)| m - t).collect(),
        mean_theta: mean,
        median_theta,
        empirical_cov: cov,
        median_abs_err,
        coverage,
    }
}

fn median_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Runs `sc.replications` replications of each requested method and
/// aggregates bias, spread, coverage, and the KO-sweep drift table.
/// Individual replication failures are recorded and excluded; more than 5%
/// failures fails the study.
pub fn mc_study(
    sc: &ScenarioSpec,
    methods: &[StudyMethod],
    settings: &StudySettings,
) -> Result<StudyReport> {
    sc.validate()?;
    if methods.is_empty() {
        return Err(Error::Validation("mc_study needs at least one method".into()));
    }
    let started = Instant::now();
    let rule = Arc::new(build_quadrature(
        &sc.domain,
        QuadratureKind::default_for_dim(sc.domain.dim()),
        settings.quad_level,
    )?);
    let theta_star = oracle_theta_star(sc, &rule)?;
    let r = sc.replications;

    let mut per_rep: Vec<RepRecord> = Vec::new();
    let mut summaries = Vec::new();
    for &method in methods {
        let records: Vec<RepRecord> = (0..r as u64)
            .into_par_iter()
            .map(|rep| run_one(sc, settings, &rule, method, &theta_star, rep, None))
            .collect();
        let summary = summarize(method.name(), &records, &theta_star, r);
        if summary.failures * 20 > r {
            let first = records
                .iter()
                .find_map(|rec| rec.error.clone())
                .unwrap_or_default();
            return Err(Error::Optimization(format!(
                "method {} failed {}/{} replications (first error: {first})",
                method.name(),
                summary.failures,
                r
            )));
        }
        summaries.push(summary);
        per_rep.extend(records);
    }

    // KO prior-sensitivity sweep, with the projected fit at the same
    // lambdas for contrast.
    let mut ko_sweep = Vec::new();
    let mut ko_drift = 0.0f64;
    let mut pk_drift = 0.0f64;
    if methods.contains(&StudyMethod::KoMode) && !settings.ko_sweep.is_empty() {
        let mut ko_medians = Vec::new();
        let mut pk_medians = Vec::new();
        for &lambda in &settings.ko_sweep {
            for method in [StudyMethod::KoMode, StudyMethod::Pk] {
                let records: Vec<RepRecord> = (0..r as u64)
                    .into_par_iter()
                    .map(|rep| {
                        run_one(sc, settings, &rule, method, &theta_star, rep, Some(lambda))
                    })
                    .collect();
                let summary = summarize(method.name(), &records, &theta_star, r);
                if summary.failures * 20 > r {
                    return Err(Error::Optimization(format!(
                        "sweep method {} at lambda {lambda} failed {}/{} replications",
                        method.name(),
                        summary.failures,
                        r
                    )));
                }
                if method == StudyMethod::KoMode {
                    ko_medians.push(summary.median_theta.clone());
                } else {
                    pk_medians.push(summary.median_theta.clone());
                }
                per_rep.extend(records);
            }
        }
        for i in 0..settings.ko_sweep.len() {
            ko_sweep.push(SweepRow {
                lambda: settings.ko_sweep[i],
                ko_median: ko_medians[i].clone(),
                pk_median: pk_medians[i].clone(),
            });
            for j in (i + 1)..settings.ko_sweep.len() {
                ko_drift = ko_drift.max(median_distance(&ko_medians[i], &ko_medians[j]));
                pk_drift = pk_drift.max(median_distance(&pk_medians[i], &pk_medians[j]));
            }
        }
    }

    let asymptotic_cov = {
        let (x, y) = simulate(sc, 0);
        let problem = make_problem(sc, settings, &rule, x, y, 0);
        let zeta = sc.zeta.clone();
        let cov = asymptotic_covariance(&problem, &theta_star, sc.sigma * sc.sigma, &|x| {
            zeta(x)
        })?;
        (0..cov.nrows())
            .map(|i| (0..cov.ncols()).map(|j| cov[(i, j)]).collect())
            .collect()
    };

    Ok(StudyReport {
        scenario: sc.name.clone(),
        n: sc.n,
        replications: r,
        seed: sc.seed,
        sigma: sc.sigma,
        theta_star,
        asymptotic_cov,
        methods: summaries,
        ko_sweep,
        ko_drift,
        pk_drift,
        per_rep,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Convergence-rate study.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum RateLambda {
    /// Select by GCV at every (n, replication).
    Gcv,
    /// Deterministic schedule `c * n^(-2m / (2m + d))`.
    Schedule { c: f64, m: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateSettings {
    pub lambda: RateLambda,
    pub optimizer: OptimizerSettings,
    pub quad_level: usize,
}

impl Default for RateSettings {
    fn default() -> Self {
        RateSettings {
            lambda: RateLambda::Gcv,
            optimizer: OptimizerSettings::default(),
            quad_level: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub scenario: String,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    /// Median quadrature L2 prediction error per sample size.
    pub median_errors: Vec<f64>,
    /// Least-squares slope of log error against log n.
    pub slope: f64,
    pub per_rep: Vec<(usize, u64, f64)>,
    pub runtime_seconds: f64,
}

/// Prediction-error decay along a sample-size grid: median L2 error of the
/// fitted true-process estimate over `r` replications per n, and the
/// log-log slope.
pub fn rate_study(
    sc: &ScenarioSpec,
    n_grid: &[usize],
    r: usize,
    settings: &RateSettings,
) -> Result<RateReport> {
    sc.validate()?;
    if n_grid.len() < 3 || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(
            "n_grid must be increasing with at least 3 entries".into(),
        ));
    }
    if r < 1 {
        return Err(Error::Validation("rate study needs r >= 1".into()));
    }
    let started = Instant::now();
    let rule = Arc::new(build_quadrature(
        &sc.domain,
        QuadratureKind::default_for_dim(sc.domain.dim()),
        settings.quad_level,
    )?);
    let d = sc.domain.dim() as f64;
    let mut per_rep = Vec::new();
    let mut median_errors = Vec::new();
    for &n in n_grid {
        let mut sub = sc.clone();
        sub.n = n;
        // Different n must not share draws: fold n into the seed stream.
        sub.seed = split_seed(sc.seed, n as u64);
        let lambda = match &settings.lambda {
            RateLambda::Gcv => LambdaPolicy::default(),
            RateLambda::Schedule { c, m } => LambdaPolicy::Fixed {
                value: c * (n as f64).powf(-2.0 * m / (2.0 * m + d)),
            },
        };
        let errors: Vec<Result<f64>> = (0..r as u64)
            .into_par_iter()
            .map(|rep| {
                let (x, y) = simulate(&sub, rep);
                let mut problem = CalibrationProblem::new(
                    x,
                    y,
                    sub.model.clone(),
                    sub.kernel.clone(),
                    sub.domain.clone(),
                    rule.clone(),
                );
                problem.lambda = lambda.clone();
                problem.optimizer = settings.optimizer.clone();
                problem.seed = split_seed(sub.seed, rep);
                let fit = fit_pk(&problem)?;
                let predictor = Predictor::new(&problem, &fit)?;
                let zeta = sub.zeta.clone();
                predictor.l2_error(&|x: &[f64]| zeta(x), &rule)
            })
            .collect();
        let mut vals = Vec::with_capacity(r);
        for (rep, e) in errors.into_iter().enumerate() {
            let v = e?;
            per_rep.push((n, rep as u64, v));
            vals.push(v);
        }
        vals.sort_by(f64::total_cmp);
        median_errors.push(vals[vals.len() / 2]);
    }

    // Least squares on (log n, log err).
    let lx: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = median_errors.iter().map(|&e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxx: f64 = lx.iter().map(|&v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;

    Ok(RateReport {
        scenario: sc.name.clone(),
        n_grid: n_grid.to_vec(),
        replications: r,
        median_errors,
        slope,
        per_rep,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}
