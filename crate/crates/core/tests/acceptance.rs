//! Verification gate: one test per shipped guarantee, each printing a
//! PASS/FAIL line with the measured numbers. Run with
//! `cargo test -p pkcal-core --test acceptance -- --nocapture --test-threads 1`
//! to see every line; the suite also participates in plain `cargo test`.

use pkcal_core::bayes::{
    credible_region, log_marginal_posterior, sample_posterior, McmcSettings, PosteriorSpec,
    PosteriorVariant,
};
use pkcal_core::calibrate::{
    fit_l2, gcv_select, profile_objective, CalibrationProblem, LambdaPolicy,
};
use pkcal_core::domain::{build_quadrature, l2_inner, DomainSpec, QuadratureKind};
use pkcal_core::kernel::{KernelFamily, KernelSpec};
use pkcal_core::model::{builtin, BuiltinConfig};
use pkcal_core::projection::{kappa_apply, ProjectedKernel, SubspaceBasis};
use pkcal_core::study::{
    mc_study, oracle_theta_star, rate_study, scenario, simulate, RateSettings, StudyMethod,
    StudySettings,
};
use pkcal_core::{real_fn, RealFn};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

fn pass(n: u32, label: &str, detail: &str) {
    println!("criterion {n} ({label}): PASS - {detail}");
}

fn gate(n: u32, label: &str, ok: bool, detail: &str) {
    if ok {
        pass(n, label, detail);
    } else {
        println!("criterion {n} ({label}): FAIL - {detail}");
        panic!("criterion {n} ({label}) failed: {detail}");
    }
}

fn unit_rule(level: usize) -> Arc<pkcal_core::domain::QuadratureRule> {
    Arc::new(build_quadrature(&DomainSpec::unit(1), QuadratureKind::TensorGauss, level).unwrap())
}

/// Built-in model sensitivity spans used by criteria 2 and 3, with a
/// representative theta for the theta-dependent one.
fn builtin_spans() -> Vec<(&'static str, Vec<RealFn>)> {
    vec![
        (
            "linear-features",
            vec![real_fn(|_: &[f64]| 1.0), real_fn(|x: &[f64]| x[0])],
        ),
        (
            "sine-freq",
            vec![
                real_fn(|x: &[f64]| (3.0 * x[0]).sin()),
                real_fn(|x: &[f64]| 2.0 * x[0] * (3.0 * x[0]).cos()),
            ],
        ),
    ]
}

#[test]
fn criterion_01_projected_kernel_matches_dense_oracle() {
    let started = Instant::now();
    let rule = unit_rule(24);
    let kernel = KernelSpec::isotropic(KernelFamily::Gaussian, 1, 1.0, 1.0).unwrap();
    let basis = SubspaceBasis::from_funcs(vec![real_fn(|_| 1.0)], &rule, 1e-10).unwrap();
    let pk = ProjectedKernel::new(kernel.clone(), basis, rule).unwrap();

    // Dense midpoint-grid oracle of the projected-kernel formula.
    let m = 1000;
    let h = 1.0 / m as f64;
    let grid: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * h).collect();
    let kbar: f64 = grid
        .iter()
        .map(|&x| {
            grid.iter()
                .map(|&y| kernel.eval(&[x], &[y]).unwrap())
                .sum::<f64>()
        })
        .sum::<f64>()
        * h
        * h;
    let int_at = |s: f64| -> f64 {
        grid.iter()
            .map(|&x| kernel.eval(&[x], &[s]).unwrap())
            .sum::<f64>()
            * h
    };

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = rng.random_range(0.0..1.0);
        let t = rng.random_range(0.0..1.0);
        let got = pk.eval(&[s], &[t]).unwrap();
        let oracle = kernel.eval(&[s], &[t]).unwrap() - int_at(s) - int_at(t) + kbar;
        worst = worst.max((got - oracle).abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        1,
        "projected-kernel correctness",
        worst <= 1e-5 && elapsed < 10.0,
        &format!("max |pk - dense oracle| = {worst:.2e} over 100 pairs in {elapsed:.2}s"),
    );
}

#[test]
fn criterion_02_annihilation_and_orthogonality() {
    let rule = unit_rule(24);
    let mut worst_annihilation = 0.0f64;
    let mut worst_ortho = 0.0f64;
    let probes: Vec<Vec<f64>> = (0..9).map(|i| vec![0.1 * (i as f64 + 0.5)]).collect();
    for family in KernelFamily::ALL {
        let kernel = KernelSpec::isotropic(family, 1, 0.4, 1.0).unwrap();
        for (name, funcs) in builtin_spans() {
            let basis = SubspaceBasis::from_funcs(funcs.clone(), &rule, 1e-10).unwrap();
            let pk = ProjectedKernel::new(kernel.clone(), basis.clone(), rule.clone()).unwrap();
            // kappa(K_G, g) = 0 for raw span members.
            for g in &funcs {
                let g = g.clone();
                let vals = kappa_apply(&pk, move |x| g(x), &rule, &probes).unwrap();
                for v in vals {
                    worst_annihilation = worst_annihilation.max(v.abs());
                }
            }
            // <kappa(K_G, f), e_i> = 0 for random smooth f.
            let mut rng = ChaCha8Rng::seed_from_u64(202);
            for _ in 0..50 {
                let (a, b, c) = (
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(1.0..7.0),
                );
                let f = move |x: &[f64]| a + b * x[0] + (c * x[0]).sin();
                for i in 0..basis.rank() {
                    let ip = l2_inner(
                        |t| kappa_apply(&pk, f, &rule, &[t.to_vec()]).unwrap()[0],
                        |t| basis.eval_ortho(i, t),
                        &rule,
                    )
                    .unwrap();
                    worst_ortho = worst_ortho.max(ip.abs());
                }
            }
            let _ = name;
        }
    }
    gate(
        2,
        "annihilation and range orthogonality",
        worst_annihilation <= 1e-8 && worst_ortho <= 1e-8,
        &format!(
            "max |kappa(K_G, g)| = {worst_annihilation:.2e}, max <kappa f, e_i> = {worst_ortho:.2e}"
        ),
    );
}

#[test]
fn criterion_03_positive_definiteness() {
    let rule = unit_rule(24);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let points: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
    let mut worst_ratio = 0.0f64;
    for family in KernelFamily::ALL {
        let kernel = KernelSpec::isotropic(family, 1, 0.4, 1.0).unwrap();
        for (name, funcs) in builtin_spans() {
            let basis = SubspaceBasis::from_funcs(funcs, &rule, 1e-10).unwrap();
            let pk = ProjectedKernel::new(kernel.clone(), basis, rule.clone()).unwrap();
            let gram = pk.matrix(&points).unwrap();
            let eig = gram.symmetric_eigenvalues();
            let ratio = -eig.min() / eig.max();
            worst_ratio = worst_ratio.max(ratio);
            assert!(
                eig.min() >= -1e-8 * eig.max(),
                "{} x {name}: min {} max {}",
                family.name(),
                eig.min(),
                eig.max()
            );
        }
    }
    gate(
        3,
        "positive definiteness",
        worst_ratio <= 1e-8,
        &format!("worst -min/max eigenvalue ratio = {worst_ratio:.2e} over 8 combinations"),
    );
}

#[test]
fn criterion_04_profile_solver_exactness() {
    let domain = DomainSpec::unit(1);
    let rule = unit_rule(24);
    let model = builtin(
        "linear-features",
        &BuiltinConfig {
            dim: 1,
            degree: 1,
            theta_bounds: Some(vec![(-5.0, 5.0), (-5.0, 5.0)]),
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_j = 0.0f64;
    let mut worst_alpha = 0.0f64;
    for trial in 0..20 {
        let n = rng.random_range(5..=30);
        // Slow-eigendecay families keep the dense quadratic system
        // numerically nonsingular, so its alpha is actually unique; with
        // smoother kernels the gram's null directions leave the oracle's
        // coefficients undetermined even though J agrees.
        let family = if trial % 2 == 0 {
            KernelFamily::Matern12
        } else {
            KernelFamily::Matern32
        };
        let kernel =
            KernelSpec::isotropic(family, 1, rng.random_range(0.2..0.5), 1.0).unwrap();
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|xi| (5.0 * xi[0]).sin() + rng.random_range(-0.2..0.2))
            .collect();
        let problem = CalibrationProblem::new(
            x.clone(),
            y.clone(),
            model.clone(),
            kernel.clone(),
            domain.clone(),
            rule.clone(),
        );
        let theta = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let lambda = 10f64.powf(rng.random_range(-2.5..0.0));
        let (j, alpha) = profile_objective(&problem, &theta, lambda).unwrap();

        // Independent dense quadratic solve of the representer objective.
        let basis = SubspaceBasis::from_funcs(
            vec![real_fn(|_| 1.0), real_fn(|x: &[f64]| x[0])],
            &rule,
            1e-10,
        )
        .unwrap();
        let pk = ProjectedKernel::new(kernel, basis, rule.clone()).unwrap();
        let gram = pk.matrix(&x).unwrap();
        let r = DVector::from_fn(n, |i, _| {
            y[i] - model.eval(&x[i], &theta).unwrap()
        });
        let nf = n as f64;
        let a_mat = &gram * &gram / nf + &gram * lambda;
        let b = &gram * &r / nf;
        let alpha_qp = a_mat.lu().solve(&b).unwrap();
        let j_qp = (&r - &gram * &alpha_qp).norm_squared() / nf
            + lambda * (alpha_qp.transpose() * &gram * &alpha_qp)[(0, 0)];
        worst_j = worst_j.max((j - j_qp).abs() / (1.0 + j.abs()));
        let scale = 1.0 + alpha_qp.abs().max();
        for (i, &a) in alpha.iter().enumerate() {
            worst_alpha = worst_alpha.max((a - alpha_qp[i]).abs() / scale);
        }
    }
    gate(
        4,
        "profile-solver exactness",
        worst_j <= 1e-8 && worst_alpha <= 1e-8,
        &format!("max |J - J_qp| = {worst_j:.2e}, max |alpha - alpha_qp| = {worst_alpha:.2e}"),
    );
}

#[test]
fn criterion_05_estimation_consistency() {
    let started = Instant::now();
    let mut medians = Vec::new();
    for n in [50usize, 200] {
        let mut sc = scenario("s2").unwrap();
        sc.n = n;
        sc.replications = 100;
        let mut settings = StudySettings::default();
        settings.ko_sweep.clear();
        let report = mc_study(&sc, &[StudyMethod::Pk], &settings).unwrap();
        medians.push(report.methods[0].median_abs_err);
    }
    let shrink = 1.0 - medians[1] / medians[0];
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        5,
        "estimation consistency",
        shrink >= 0.25 && elapsed < 600.0,
        &format!(
            "median |theta - theta*|: n=50 -> {:.4}, n=200 -> {:.4} ({:.0}% shrink) in {elapsed:.0}s",
            medians[0],
            medians[1],
            100.0 * shrink
        ),
    );
}

#[test]
fn criterion_06_efficiency_representation() {
    let started = Instant::now();
    let mut sc = scenario("s2").unwrap();
    sc.n = 100;
    sc.replications = 500;
    let mut settings = StudySettings::default();
    settings.ko_sweep.clear();
    let report = mc_study(&sc, &[StudyMethod::Pk], &settings).unwrap();
    let emp = &report.methods[0].empirical_cov;
    let asym = &report.asymptotic_cov;
    let mut worst_rel = 0.0f64;
    for a in 0..2 {
        for b in 0..2 {
            let rel = (emp[a][b] - asym[a][b]).abs() / asym[a][b].abs();
            worst_rel = worst_rel.max(rel);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    gate(
        6,
        "efficiency representation",
        worst_rel <= 0.30 && elapsed < 1800.0,
        &format!(
            "max entrywise relative gap = {:.1}% over 500 replications in {elapsed:.0}s",
            100.0 * worst_rel
        ),
    );
}

#[test]
fn criterion_07_ko_drift_vs_pk_stability() {
    let mut sc = scenario("s2").unwrap();
    sc.replications = 100;
    let settings = StudySettings::default(); // sweep 1e-4, 1e-2, 1
    let report = mc_study(&sc, &[StudyMethod::KoMode], &settings).unwrap();
    let ratio = report.ko_drift / report.pk_drift.max(f64::MIN_POSITIVE);
    gate(
        7,
        "ko inconsistency vs pk stability",
        ratio > 5.0,
        &format!(
            "ko drift {:.4}, pk drift {:.4}, ratio {ratio:.1}",
            report.ko_drift, report.pk_drift
        ),
    );
}

#[test]
fn criterion_08_bayesian_marginalization_exactness() {
    // n = 2 toy problem with a dense-grid alpha-integration oracle.
    let domain = DomainSpec::unit(1);
    let rule = unit_rule(16);
    let model = builtin(
        "linear-features",
        &BuiltinConfig {
            dim: 1,
            degree: 0,
            theta_bounds: Some(vec![(-4.0, 4.0)]),
        },
    )
    .unwrap();
    let kernel = KernelSpec::isotropic(KernelFamily::Matern52, 1, 0.3, 1.0).unwrap();
    let x = vec![vec![0.25], vec![0.8]];
    let y = vec![1.3, 0.6];
    let problem = CalibrationProblem::new(
        x.clone(),
        y.clone(),
        model.clone(),
        kernel.clone(),
        domain,
        rule.clone(),
    );
    let lambda = 0.07;
    let thetas = [[-0.6], [0.2], [0.9]];
    let mut worst = 0.0f64;
    for variant in [
        PosteriorVariant::Pk,
        PosteriorVariant::Ko,
        PosteriorVariant::Ogp,
    ] {
        let spec = PosteriorSpec::new(variant, lambda, kernel.clone());
        let mut shifts = Vec::new();
        for theta in &thetas {
            let analytic = log_marginal_posterior(&spec, &problem, theta).unwrap();
            // Brute-force marginal on a 400^2 alpha grid.
            let gram = match variant {
                PosteriorVariant::Ko => kernel.matrix(&x, &x).unwrap(),
                _ => {
                    let basis =
                        SubspaceBasis::from_funcs(vec![real_fn(|_| 1.0)], &rule, 1e-10).unwrap();
                    ProjectedKernel::new(kernel.clone(), basis, rule.clone())
                        .unwrap()
                        .matrix(&x)
                        .unwrap()
                }
            };
            let r = DVector::from_column_slice(&[
                y[0] - model.eval(&x[0], theta).unwrap(),
                y[1] - model.eval(&x[1], theta).unwrap(),
            ]);
            let mean = (gram.clone() + DMatrix::identity(2, 2) * (2.0 * lambda))
                .lu()
                .solve(&r)
                .unwrap();
            let qmat = &gram * &gram / 2.0 + &gram * lambda;
            let sd = (qmat.try_inverse().unwrap() * 0.5)
                .diagonal()
                .max()
                .sqrt();
            let half = 8.0 * sd;
            let grid = 400;
            let step = 2.0 * half / grid as f64;
            let mut expos = Vec::with_capacity(grid * grid);
            let mut max_expo = f64::NEG_INFINITY;
            for i in 0..grid {
                for j in 0..grid {
                    let a = DVector::from_vec(vec![
                        mean[0] - half + (i as f64 + 0.5) * step,
                        mean[1] - half + (j as f64 + 0.5) * step,
                    ]);
                    let resid = &r - &gram * &a;
                    let expo = -resid.norm_squared() / 2.0
                        - lambda * (a.transpose() * &gram * &a)[(0, 0)];
                    max_expo = max_expo.max(expo);
                    expos.push(expo);
                }
            }
            let acc: f64 = expos.into_iter().map(|e| (e - max_expo).exp()).sum();
            let mut brute = max_expo + (acc * step * step).ln();
            if matches!(variant, PosteriorVariant::Ogp) {
                let eig = gram.symmetric_eigenvalues();
                brute -= 0.5 * eig.iter().map(|&d| d.max(1e-300).ln()).sum::<f64>();
            }
            shifts.push(analytic - brute);
        }
        for s in &shifts[1..] {
            worst = worst.max((s - shifts[0]).abs());
        }
    }
    gate(
        8,
        "bayesian marginalization exactness",
        worst <= 1e-3,
        &format!("max constant-shift deviation = {worst:.2e} across PK, KO, OGP"),
    );
}

#[test]
fn criterion_09_credible_set_coverage() {
    // S1 with lambda from GCV, 95% equal-tailed intervals, 200
    // replications. The likelihood exponent is -RSS/n with no
    // noise-variance scale, so the credible sets are conditional on
    // lambda and strongly conservative at this noise level.
    let mut sc = scenario("s1").unwrap();
    sc.replications = 200;
    let rule = Arc::new(
        build_quadrature(&sc.domain, QuadratureKind::TensorGauss, 32).unwrap(),
    );
    let theta_star = oracle_theta_star(&sc, &rule).unwrap();
    let grid = LambdaPolicy::default_grid();
    let mut covered = [0usize; 2];
    for rep in 0..sc.replications as u64 {
        let (x, y) = simulate(&sc, rep);
        let mut problem = CalibrationProblem::new(
            x,
            y,
            sc.model.clone(),
            sc.kernel.clone(),
            sc.domain.clone(),
            rule.clone(),
        );
        problem.seed = rep;
        let pilot = fit_l2(&problem).unwrap();
        let (lambda, _) = gcv_select(&problem, &pilot.theta_hat, &grid).unwrap();
        let mut spec = PosteriorSpec::new(PosteriorVariant::Pk, lambda, problem.kernel.clone());
        spec.mcmc = McmcSettings {
            chains: 2,
            burn_in: 400,
            samples: 600,
            target_accept: 0.3,
            adapt_window: 50,
        };
        spec.seed = 5000 + rep;
        let chains = sample_posterior(&spec, &problem).unwrap();
        let region = credible_region(&chains, 0.95).unwrap();
        for i in 0..2 {
            let (lo, hi) = region.intervals[i];
            if lo <= theta_star[i] && theta_star[i] <= hi {
                covered[i] += 1;
            }
        }
    }
    let rates: Vec<f64> = covered
        .iter()
        .map(|&c| c as f64 / sc.replications as f64)
        .collect();
    let in_band = rates.iter().all(|&r| (0.88..=0.99).contains(&r));
    gate(
        9,
        "credible-set coverage",
        in_band,
        &format!(
            "per-coordinate coverage {:?} over {} replications (band [0.88, 0.99])",
            rates, sc.replications
        ),
    );
}

#[test]
fn criterion_10_rate_sanity() {
    let sc = scenario("s2").unwrap();
    let report = rate_study(&sc, &[50, 100, 200, 400], 50, &RateSettings::default()).unwrap();
    let slope = report.slope;
    gate(
        10,
        "prediction-rate sanity",
        (-0.65..=-0.25).contains(&slope),
        &format!(
            "log-log slope {slope:.3} (theory -3/7 = -0.429), medians {:?}",
            report
                .median_errors
                .iter()
                .map(|e| format!("{e:.4}"))
                .collect::<Vec<_>>()
        ),
    );
}
