//! Posterior inference for the calibration parameter.
//!
//! The working object is the marginal posterior of theta after integrating
//! the representer coefficients out analytically. With gram `K` (projected
//! at theta for the PK variant, the base kernel for KO) and residual
//! `r = y - y_s(X, theta)`,
//!
//! ```text
//! log p(theta | y) = -lambda r' (K + n lambda I)^-1 r
//!                    - 1/2 log det(K/n + lambda I)
//!                    - 1/2 log det(K)            (+ const)
//! ```
//!
//! The OGP variant multiplies the prior by `det(K_G(theta))^-1/2`, adding
//! one more `-1/2 log det` term. Sampling is adaptive random-walk
//! Metropolis with a uniform prior on the parameter box; the proposal
//! covariance adapts during burn-in and is frozen afterwards.

use crate::calibrate::{CalibrationProblem, FitContext};
use crate::kernel::KernelSpec;
use crate::{split_seed, Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorVariant {
    /// Projected-kernel likelihood and prior.
    Pk,
    /// Unprojected kernel in both likelihood and prior.
    Ko,
    /// PK plus the orthogonal-GP determinant factor in the prior.
    Ogp,
}

/// Prior on theta. Uniform keeps the posterior mode aligned with the
/// penalized point estimate; the enum leaves room for more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaPrior {
    #[default]
    UniformOnTheta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSettings {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub adapt_window: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            chains: 4,
            burn_in: 1000,
            samples: 2000,
            target_accept: 0.3,
            adapt_window: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSpec {
    pub variant: PosteriorVariant,
    pub lambda: f64,
    pub kernel: KernelSpec,
    pub theta_prior: ThetaPrior,
    /// Use the literal OGP reading (unprojected kernel in likelihood and
    /// prior, projected determinant) instead of the determinant-factor
    /// reading.
    pub ogp_literal: bool,
    pub mcmc: McmcSettings,
    pub seed: u64,
}

impl PosteriorSpec {
    pub fn new(variant: PosteriorVariant, lambda: f64, kernel: KernelSpec) -> Self {
        PosteriorSpec {
            variant,
            lambda,
            kernel,
            theta_prior: ThetaPrior::UniformOnTheta,
            ogp_literal: false,
            mcmc: McmcSettings::default(),
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Validation(format!(
                "posterior lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.mcmc.chains < 1 || self.mcmc.samples < 1 {
            return Err(Error::Validation(
                "mcmc needs chains >= 1 and samples >= 1".into(),
            ));
        }
        if !(self.mcmc.target_accept > 0.0 && self.mcmc.target_accept < 1.0) {
            return Err(Error::Validation(
                "target_accept must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One chain of posterior draws with its diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcChain {
    /// Post-burn-in draws, one row per sample.
    pub samples: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub acceptance_rate: f64,
    /// Split R-hat of this chain's two halves, per coordinate.
    pub split_rhat: Vec<f64>,
    /// Effective sample size per coordinate.
    pub ess: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Log density.

/// log det of a symmetric PSD matrix from clamped eigenvalues, floored
/// relative to the largest one so rank-deficient grams stay finite.
fn logdet_psd(eigvals: &DVector<f64>) -> f64 {
    let dmax = eigvals
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let floor = dmax * 1e-15;
    eigvals.iter().map(|&d| d.max(floor).ln()).sum()
}

struct DensityParts {
    quad: f64,
    logdet_shifted: f64,
    logdet_gram: f64,
}

fn density_parts(gram: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> DensityParts {
    let n = gram.nrows() as f64;
    let mut eig = nalgebra::SymmetricEigen::new(gram.clone());
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let z = eig.eigenvectors.transpose() * r;
    let nl = n * lambda;
    let quad = lambda
        * z.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(&zi, &di)| zi * zi / (di + nl))
            .sum::<f64>();
    let logdet_shifted = eig.eigenvalues.iter().map(|&d| (d / n + lambda).ln()).sum();
    let logdet_gram = logdet_psd(&eig.eigenvalues);
    DensityParts {
        quad,
        logdet_shifted,
        logdet_gram,
    }
}

/// Marginal log-posterior evaluator bound to one problem and spec.
pub struct Posterior<'a> {
    spec: &'a PosteriorSpec,
    problem: CalibrationProblem,
    bounds: Vec<(f64, f64)>,
}

/// Spectral pieces of one gram matrix, reusable across evaluations when
/// the gram does not move with theta.
struct PreparedGram {
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    logdet_shifted: f64,
    logdet_gram: f64,
}

impl PreparedGram {
    fn new(gram: &DMatrix<f64>, n: f64, lambda: f64) -> Self {
        let mut eig = nalgebra::SymmetricEigen::new(gram.clone());
        for v in eig.eigenvalues.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let logdet_shifted = eig.eigenvalues.iter().map(|&d| (d / n + lambda).ln()).sum();
        let logdet_gram = logdet_psd(&eig.eigenvalues);
        PreparedGram {
            eigvals: eig.eigenvalues,
            eigvecs: eig.eigenvectors,
            logdet_shifted,
            logdet_gram,
        }
    }

    fn quad(&self, r: &DVector<f64>, lambda: f64) -> f64 {
        let n = r.len() as f64;
        let z = self.eigvecs.transpose() * r;
        let nl = n * lambda;
        lambda
            * z.iter()
                .zip(self.eigvals.iter())
                .map(|(&zi, &di)| zi * zi / (di + nl))
                .sum::<f64>()
    }
}

enum DensityEngine {
    /// Gram fixed in theta: only the quadratic term moves.
    Fixed {
        parts: PreparedGram,
        /// Extra theta-independent log-determinant terms (OGP factor).
        extra: f64,
    },
    /// Reassemble the projected gram(s) at every theta.
    PerTheta,
}

/// Density evaluator with per-problem caches; build once, evaluate often.
pub struct DensityEvaluator<'p, 'c> {
    posterior: &'p Posterior<'p>,
    ctx: &'c FitContext<'c>,
    engine: DensityEngine,
}

impl<'a> Posterior<'a> {
    pub fn new(spec: &'a PosteriorSpec, problem: &CalibrationProblem) -> Result<Self> {
        spec.validate()?;
        problem.validate()?;
        // The posterior owns a problem copy carrying the spec's kernel, so
        // evaluator and frequentist fits can differ on kernels only
        // deliberately.
        let mut problem = problem.clone();
        problem.kernel = spec.kernel.clone();
        let bounds = problem.model.theta_bounds().to_vec();
        Ok(Posterior {
            spec,
            problem,
            bounds,
        })
    }

    pub fn problem(&self) -> &CalibrationProblem {
        &self.problem
    }

    /// Builds the evaluation engine for a context created from
    /// [`Posterior::problem`].
    pub(crate) fn evaluator<'c>(
        &'a self,
        ctx: &'c FitContext<'c>,
    ) -> Result<DensityEvaluator<'a, 'c>> {
        let n = ctx.kxx.nrows() as f64;
        let lambda = self.spec.lambda;
        let fixed_span = self.problem.model.constant_sensitivities();
        let engine = match (self.spec.variant, self.spec.ogp_literal) {
            (PosteriorVariant::Ko, _) => DensityEngine::Fixed {
                parts: PreparedGram::new(&ctx.kxx, n, lambda),
                extra: 0.0,
            },
            (PosteriorVariant::Pk, _) if fixed_span => {
                let center = center_of(&self.bounds);
                let (_, gram) = ctx.projected_at(&center)?;
                DensityEngine::Fixed {
                    parts: PreparedGram::new(&gram, n, lambda),
                    extra: 0.0,
                }
            }
            (PosteriorVariant::Ogp, false) if fixed_span => {
                let center = center_of(&self.bounds);
                let (_, gram) = ctx.projected_at(&center)?;
                let parts = PreparedGram::new(&gram, n, lambda);
                let extra = 0.5 * parts.logdet_gram;
                DensityEngine::Fixed { parts, extra }
            }
            (PosteriorVariant::Ogp, true) if fixed_span => {
                let center = center_of(&self.bounds);
                let (_, gram) = ctx.projected_at(&center)?;
                let pg = PreparedGram::new(&gram, n, lambda);
                DensityEngine::Fixed {
                    parts: PreparedGram::new(&ctx.kxx, n, lambda),
                    extra: 0.5 * pg.logdet_gram,
                }
            }
            _ => DensityEngine::PerTheta,
        };
        Ok(DensityEvaluator {
            posterior: self,
            ctx,
            engine,
        })
    }

    /// Unnormalized marginal log posterior; `-inf` outside the parameter
    /// box under the uniform prior.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let ctx = FitContext::new(&self.problem)?;
        self.evaluator(&ctx)?.log_density(theta)
    }
}

impl DensityEvaluator<'_, '_> {
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let bounds = &self.posterior.bounds;
        if theta.len() != bounds.len() {
            return Err(Error::Validation(format!(
                "theta has dimension {}, expected {}",
                theta.len(),
                bounds.len()
            )));
        }
        if theta.iter().zip(bounds).any(|(&t, &(a, b))| t < a || t > b) {
            return Ok(f64::NEG_INFINITY);
        }
        let spec = self.posterior.spec;
        let ctx = self.ctx;
        let lambda = spec.lambda;
        let r = ctx.residual(theta)?;
        let value = match &self.engine {
            DensityEngine::Fixed { parts, extra } => {
                -parts.quad(&r, lambda) - 0.5 * parts.logdet_shifted
                    - 0.5 * parts.logdet_gram
                    - extra
            }
            DensityEngine::PerTheta => match (spec.variant, spec.ogp_literal) {
                (PosteriorVariant::Pk, _) => {
                    let (_, gram) = ctx.projected_at(theta)?;
                    let p = density_parts(&gram, &r, lambda);
                    -p.quad - 0.5 * p.logdet_shifted - 0.5 * p.logdet_gram
                }
                (PosteriorVariant::Ko, _) => {
                    let p = density_parts(&ctx.kxx, &r, lambda);
                    -p.quad - 0.5 * p.logdet_shifted - 0.5 * p.logdet_gram
                }
                (PosteriorVariant::Ogp, false) => {
                    // Determinant-factor reading: the PK posterior times
                    // det(K_G)^-1/2.
                    let (_, gram) = ctx.projected_at(theta)?;
                    let p = density_parts(&gram, &r, lambda);
                    -p.quad - 0.5 * p.logdet_shifted - p.logdet_gram
                }
                (PosteriorVariant::Ogp, true) => {
                    // Literal reading: unprojected likelihood and prior,
                    // the projected determinant tagging along.
                    let base = density_parts(&ctx.kxx, &r, lambda);
                    let (_, gram) = ctx.projected_at(theta)?;
                    let pg = density_parts(&gram, &r, lambda);
                    -base.quad - 0.5 * base.logdet_shifted - 0.5 * base.logdet_gram
                        - 0.5 * pg.logdet_gram
                }
            },
        };
        if value.is_nan() {
            return Err(Error::Numeric(format!(
                "posterior log density is NaN at theta {theta:?}"
            )));
        }
        Ok(value)
    }
}

fn center_of(bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds.iter().map(|&(a, b)| 0.5 * (a + b)).collect()
}

/// Marginal log posterior of theta, up to an additive constant.
pub fn log_marginal_posterior(
    spec: &PosteriorSpec,
    problem: &CalibrationProblem,
    theta: &[f64],
) -> Result<f64> {
    Posterior::new(spec, problem)?.log_density(theta)
}

/// Conditional law of the representer coefficients given theta: Gaussian
/// with mean `(K + n lambda I)^-1 r` (the profile solution) and covariance
/// `1/2 (K^2/n + lambda K)^-1`. Vectors follow the problem's data order.
pub fn conditional_alpha(
    spec: &PosteriorSpec,
    problem: &CalibrationProblem,
    theta: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    spec.validate()?;
    let mut problem = problem.clone();
    problem.kernel = spec.kernel.clone();
    let ctx = FitContext::new(&problem)?;
    let r = ctx.residual(theta)?;
    let gram = match (spec.variant, spec.ogp_literal) {
        (PosteriorVariant::Ko, _) | (PosteriorVariant::Ogp, true) => ctx.kxx.clone(),
        _ => ctx.projected_at(theta)?.1,
    };
    let n = gram.nrows();
    let nf = n as f64;
    let lambda = spec.lambda;
    let mut eig = nalgebra::SymmetricEigen::new(gram);
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let z = eig.eigenvectors.transpose() * &r;
    let mean_can = &eig.eigenvectors
        * DVector::from_fn(n, |i, _| z[i] / (eig.eigenvalues[i] + nf * lambda));
    // Covariance eigenvalues 1/(2 d (d/n + lambda)), with a conditioning
    // floor on d.
    let dmax = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let floor = dmax * 1e-12;
    let cov_eig = DVector::from_fn(n, |i, _| {
        let d = eig.eigenvalues[i].max(floor);
        0.5 / (d * (d / nf + lambda))
    });
    let mut cov_can = DMatrix::zeros(n, n);
    for i in 0..n {
        let ui = eig.eigenvectors.column(i);
        cov_can += cov_eig[i] * ui * ui.transpose();
    }
    // Map back to the user's data order.
    let mean = ctx.to_user_order(&mean_can);
    let mut cov = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            cov[(ctx.order[a], ctx.order[b])] = cov_can[(a, b)];
        }
    }
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

// ---------------------------------------------------------------------------
// Sampling.

/// Runs `spec.mcmc.chains` adaptive random-walk Metropolis chains in
/// parallel, each deterministic in (seed, chain index).
pub fn sample_posterior(
    spec: &PosteriorSpec,
    problem: &CalibrationProblem,
) -> Result<Vec<McmcChain>> {
    let posterior = Posterior::new(spec, problem)?;
    let ctx = FitContext::new(&posterior.problem)?;
    let evaluator = posterior.evaluator(&ctx)?;
    (0..spec.mcmc.chains)
        .into_par_iter()
        .map(|chain_idx| run_chain(&evaluator, chain_idx))
        .collect()
}

fn run_chain(evaluator: &DensityEvaluator<'_, '_>, chain_idx: usize) -> Result<McmcChain> {
    let posterior = evaluator.posterior;
    let spec = posterior.spec;
    let bounds = &posterior.bounds;
    let q = bounds.len();
    let mcmc = &spec.mcmc;
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(spec.seed, chain_idx as u64));

    let mut theta: Vec<f64> = bounds
        .iter()
        .map(|&(a, b)| rng.random_range(a..b))
        .collect();
    let mut logp = evaluator.log_density(&theta)?;

    // Proposal: theta' = theta + scale * L z with C = L L'.
    let widths: Vec<f64> = bounds.iter().map(|&(a, b)| b - a).collect();
    let mut chol_rows = DMatrix::zeros(q, q);
    for i in 0..q {
        chol_rows[(i, i)] = widths[i] / 20.0;
    }
    let mut scale = 1.0f64;
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(mcmc.burn_in);
    let mut accepted_burnin = 0usize;
    let mut window_accepts = 0usize;
    let mut window_count = 0usize;
    let mut window_index = 0usize;

    let total = mcmc.burn_in + mcmc.samples;
    let mut samples = Vec::with_capacity(mcmc.samples);
    let mut log_density = Vec::with_capacity(mcmc.samples);
    let mut accepted_post = 0usize;

    for step in 0..total {
        let burning = step < mcmc.burn_in;
        let mut proposal = theta.clone();
        let z: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..q {
            let mut delta = 0.0;
            for j in 0..=i {
                delta += chol_rows[(i, j)] * z[j];
            }
            proposal[i] += scale * delta;
        }
        let inside = proposal
            .iter()
            .zip(bounds)
            .all(|(&t, &(a, b))| t >= a && t <= b);
        let logp_new = if inside {
            evaluator.log_density(&proposal)?
        } else {
            f64::NEG_INFINITY
        };
        let u: f64 = rng.random();
        let accept = u.ln() < logp_new - logp;
        if accept {
            theta = proposal;
            logp = logp_new;
            if burning {
                accepted_burnin += 1;
            } else {
                accepted_post += 1;
            }
        }

        if burning {
            history.push(theta.clone());
            window_accepts += usize::from(accept);
            window_count += 1;
            if window_count == mcmc.adapt_window {
                window_index += 1;
                let rate = window_accepts as f64 / window_count as f64;
                let step_size = 0.1f64.min(1.0 / (window_index as f64).sqrt());
                scale *= ((rate - mcmc.target_accept) * step_size * 4.0).exp();
                scale = scale.clamp(1e-6, 1e3);
                if history.len() >= 20.max(4 * q) {
                    if let Some(l) = sample_chol(&history, &widths) {
                        chol_rows = l;
                    }
                }
                window_accepts = 0;
                window_count = 0;
            }
            if step + 1 == mcmc.burn_in && accepted_burnin == 0 {
                return Err(Error::Mixing(format!(
                    "chain {chain_idx}: no proposal accepted in {} burn-in steps \
                     (last log density {logp:.3e}, scale {scale:.3e})",
                    mcmc.burn_in
                )));
            }
        } else {
            samples.push(theta.clone());
            log_density.push(logp);
        }
    }

    let acceptance_rate = accepted_post as f64 / mcmc.samples as f64;
    let split_rhat = (0..q)
        .map(|d| {
            let series: Vec<f64> = samples.iter().map(|s| s[d]).collect();
            let mid = series.len() / 2;
            rhat_from_chains(&[&series[..mid], &series[mid..]])
        })
        .collect();
    let ess = (0..q)
        .map(|d| {
            let series: Vec<f64> = samples.iter().map(|s| s[d]).collect();
            ess_imse(&series)
        })
        .collect();
    Ok(McmcChain {
        samples,
        log_density,
        acceptance_rate,
        split_rhat,
        ess,
    })
}

/// Cholesky of the 2.38^2/q-scaled sample covariance of the adaptation
/// history, regularized toward the initial diagonal.
fn sample_chol(history: &[Vec<f64>], widths: &[f64]) -> Option<DMatrix<f64>> {
    let q = widths.len();
    let n = history.len() as f64;
    let mut mean = vec![0.0; q];
    for h in history {
        for (m, &v) in mean.iter_mut().zip(h) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::zeros(q, q);
    for h in history {
        for a in 0..q {
            for b in 0..q {
                cov[(a, b)] += (h[a] - mean[a]) * (h[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    let fac = 2.38 * 2.38 / q as f64;
    for a in 0..q {
        for b in 0..q {
            cov[(a, b)] *= fac;
        }
    }
    for a in 0..q {
        cov[(a, a)] += (widths[a] * 1e-6).powi(2);
    }
    nalgebra::Cholesky::new(cov).map(|c| c.l())
}

// ---------------------------------------------------------------------------
// Diagnostics.

fn rhat_from_chains(chains: &[&[f64]]) -> f64 {
    let m = chains.len() as f64;
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) as f64;
    if n < 4.0 || m < 2.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().take(n as usize).sum::<f64>() / n)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|&mu| (mu - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| {
            c.iter()
                .take(n as usize)
                .map(|&x| (x - mu).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .sum::<f64>()
        / m;
    if w < 1e-300 {
        return 1.0;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Split R-hat across chains (each chain split in half), per coordinate.
pub fn multichain_split_rhat(chains: &[McmcChain]) -> Vec<f64> {
    if chains.is_empty() {
        return Vec::new();
    }
    let q = chains[0].samples.first().map_or(0, |s| s.len());
    (0..q)
        .map(|d| {
            let series: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.samples.iter().map(|s| s[d]).collect())
                .collect();
            let halves: Vec<&[f64]> = series
                .iter()
                .flat_map(|s| {
                    let mid = s.len() / 2;
                    [&s[..mid], &s[mid..]]
                })
                .collect();
            rhat_from_chains(&halves)
        })
        .collect()
}

/// Effective sample size by the initial monotone positive-sequence
/// estimator on the autocorrelation function.
fn ess_imse(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return f64::NAN;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return f64::NAN;
    }
    let auto = |lag: usize| -> f64 {
        series[..n - lag]
            .iter()
            .zip(&series[lag..])
            .map(|(&a, &b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (n as f64)
            / var
    };
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = auto(lag) + auto(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let capped = pair.min(prev_pair);
        tau += 2.0 * capped;
        prev_pair = capped;
        lag += 2;
    }
    n as f64 / tau
}

// ---------------------------------------------------------------------------
// Credible regions.

/// Equal-tailed intervals and a Gaussian ellipsoid summary at one level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CredibleRegion {
    pub level: f64,
    /// Per-coordinate equal-tailed intervals.
    pub intervals: Vec<(f64, f64)>,
    pub center: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Squared Mahalanobis radius of the level-set ellipsoid (chi-square
    /// quantile at `level` with q degrees of freedom).
    pub chi2_radius2: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Pools post-burn-in draws from all chains into per-coordinate intervals
/// and a covariance ellipsoid.
pub fn credible_region(chains: &[McmcChain], level: f64) -> Result<CredibleRegion> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!(
            "credible level must lie in (0,1), got {level}"
        )));
    }
    let pooled: Vec<&Vec<f64>> = chains.iter().flat_map(|c| c.samples.iter()).collect();
    if pooled.len() < 100 {
        return Err(Error::Validation(format!(
            "need at least 100 pooled draws, got {}",
            pooled.len()
        )));
    }
    let q = pooled[0].len();
    let tail = 0.5 * (1.0 - level);
    let mut intervals = Vec::with_capacity(q);
    for d in 0..q {
        let mut series: Vec<f64> = pooled.iter().map(|s| s[d]).collect();
        series.sort_by(f64::total_cmp);
        intervals.push((quantile(&series, tail), quantile(&series, 1.0 - tail)));
    }
    let nf = pooled.len() as f64;
    let mut center = vec![0.0; q];
    for s in &pooled {
        for (c, &v) in center.iter_mut().zip(s.iter()) {
            *c += v / nf;
        }
    }
    let mut covariance = vec![vec![0.0; q]; q];
    for s in &pooled {
        for a in 0..q {
            for b in 0..q {
                covariance[a][b] += (s[a] - center[a]) * (s[b] - center[b]) / (nf - 1.0);
            }
        }
    }
    let chi2 = ChiSquared::new(q as f64)
        .map_err(|e| Error::Numeric(format!("chi-square setup failed: {e}")))?;
    Ok(CredibleRegion {
        level,
        intervals,
        center,
        covariance,
        chi2_radius2: chi2.inverse_cdf(level),
    })
}
