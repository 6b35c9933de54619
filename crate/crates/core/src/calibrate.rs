//! Frequentist calibration: the profile solver, GCV selection of the
//! smoothing parameter, and the projected-kernel, L2, and KO-mode fits.
//!
//! The penalized fit over (theta, delta) collapses, for fixed theta, to a
//! linear solve: with residual `r = y - y_s(X, theta)` and gram `K` (the
//! projected kernel at theta for the PK method, the base kernel for
//! KO-mode),
//!
//! ```text
//! alpha(theta) = (K + n lambda I)^-1 r
//! J(theta)     = lambda r' (K + n lambda I)^-1 r
//! ```
//!
//! The outer search over theta is multi-start Nelder-Mead. When the model's
//! sensitivity span does not move with theta the gram is assembled once and
//! eigendecomposed, making profile evaluations O(n^2).

use crate::domain::{DomainSpec, QuadratureRule};
use crate::kernel::KernelSpec;
use crate::model::ComputerModel;
use crate::optim::{multi_start, OptimizerSettings, StartReport};
use crate::projection::{NodeKernelCache, ProjectedKernel, SubspaceBasis};
use crate::{real_fn, Error, RealFn, Result};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How the smoothing parameter is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum LambdaPolicy {
    Fixed { value: f64 },
    Gcv { grid: Vec<f64> },
}

impl LambdaPolicy {
    /// Log-spaced default grid.
    pub fn default_grid() -> Vec<f64> {
        let (lo, hi, count) = (-10.0_f64, 2.0_f64, 37usize);
        (0..count)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1) as f64))
            .collect()
    }
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Gcv {
            grid: LambdaPolicy::default_grid(),
        }
    }
}

/// Data, model, kernel, and solver settings for one calibration.
#[derive(Clone)]
pub struct CalibrationProblem {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub model: Arc<dyn ComputerModel>,
    pub kernel: KernelSpec,
    pub domain: DomainSpec,
    pub rule: Arc<QuadratureRule>,
    pub lambda: LambdaPolicy,
    pub optimizer: OptimizerSettings,
    /// Relative jitter seed for factorization rescue; escalates x10 per
    /// retry up to 1e-6 relative.
    pub jitter_rel: f64,
    /// Relative rank tolerance for the sensitivity-span orthonormalization.
    pub rank_tol: f64,
    pub seed: u64,
}

impl CalibrationProblem {
    pub fn new(
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        model: Arc<dyn ComputerModel>,
        kernel: KernelSpec,
        domain: DomainSpec,
        rule: Arc<QuadratureRule>,
    ) -> Self {
        CalibrationProblem {
            x,
            y,
            model,
            kernel,
            domain,
            rule,
            lambda: LambdaPolicy::default(),
            optimizer: OptimizerSettings::default(),
            jitter_rel: 1e-10,
            rank_tol: 1e-10,
            seed: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let q = self.model.q();
        if self.x.len() != n {
            return Err(Error::Validation(format!(
                "{} design points but {} responses",
                self.x.len(),
                n
            )));
        }
        if n < q + 1 {
            return Err(Error::Validation(format!(
                "need at least q+1 = {} observations, got {n}",
                q + 1
            )));
        }
        for (i, xi) in self.x.iter().enumerate() {
            if !self.domain.contains(xi) {
                return Err(Error::Validation(format!(
                    "design point {i} = {xi:?} lies outside the domain"
                )));
            }
        }
        for i in 0..n {
            if !self.y[i].is_finite() {
                return Err(Error::Validation(format!("response {i} is not finite")));
            }
            for j in (i + 1)..n {
                if self.x[i] == self.x[j] {
                    return Err(Error::Validation(format!(
                        "duplicate design points at indices {i} and {j}"
                    )));
                }
            }
        }
        match &self.lambda {
            LambdaPolicy::Fixed { value } => {
                if !(*value > 0.0) {
                    return Err(Error::Validation(format!(
                        "fixed lambda must be positive, got {value}"
                    )));
                }
            }
            LambdaPolicy::Gcv { grid } => {
                if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0)) {
                    return Err(Error::Validation(
                        "gcv grid must be nonempty with positive entries".into(),
                    ));
                }
            }
        }
        if !(self.jitter_rel >= 0.0) {
            return Err(Error::Validation("jitter_rel must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pk,
    L2,
    KoMode,
}

/// Solver-side observability: what happened on the way to the estimate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Raw sensitivity indices dropped as numerically dependent at theta-hat.
    pub rank_drops: Vec<usize>,
    /// Total evaluations where at least one direction was dropped.
    pub drop_events: usize,
    pub jitter_events: usize,
    pub max_jitter: f64,
    pub condition_estimate: f64,
    /// Set when theta-hat is pinned to the parameter-box boundary.
    pub boundary_warning: bool,
    pub pilot_theta: Vec<f64>,
    pub starts: Vec<StartReport>,
    pub objective_evals: usize,
}

/// A fitted calibration with its coefficients and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: Method,
    pub theta_hat: Vec<f64>,
    /// Representer coefficients, aligned with the problem's data order.
    pub alpha_hat: Vec<f64>,
    pub lambda_used: f64,
    pub objective: f64,
    pub sigma2_hat: f64,
    /// Quadrature inner products of the fitted discrepancy with each
    /// sensitivity direction at theta-hat.
    pub ortho_residual: Vec<f64>,
    pub gcv_trace: Vec<(f64, f64)>,
    pub diagnostics: Diagnostics,
}

// ---------------------------------------------------------------------------
// Shared per-problem caches.

/// Theta-independent blocks: canonical data order, base-kernel grams, and
/// the kernel-at-nodes cache.
pub(crate) struct FitContext<'a> {
    pub(crate) problem: &'a CalibrationProblem,
    /// order[k] = original index of the k-th point in canonical order.
    pub(crate) order: Vec<usize>,
    pub(crate) xs: Vec<Vec<f64>>,
    pub(crate) ys: DVector<f64>,
    pub(crate) nodes: Vec<Vec<f64>>,
    pub(crate) node_cache: NodeKernelCache,
    pub(crate) kxx: DMatrix<f64>,
    pub(crate) kqx: DMatrix<f64>,
}

impl<'a> FitContext<'a> {
    pub(crate) fn new(problem: &'a CalibrationProblem) -> Result<Self> {
        problem.validate()?;
        let n = problem.n();
        // Canonical (sorted) data order makes every estimate invariant to
        // permutations of the input pairs, bit for bit.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            for (a, b) in problem.x[i].iter().zip(&problem.x[j]) {
                let c = a.total_cmp(b);
                if c != std::cmp::Ordering::Equal {
                    return c;
                }
            }
            problem.y[i].total_cmp(&problem.y[j])
        });
        let xs: Vec<Vec<f64>> = order.iter().map(|&i| problem.x[i].clone()).collect();
        let ys = DVector::from_fn(n, |k, _| problem.y[order[k]]);
        let nodes: Vec<Vec<f64>> = problem.rule.nodes().map(|x| x.to_vec()).collect();
        let node_cache = NodeKernelCache::new(&problem.kernel, &problem.rule)?;
        let kxx = problem.kernel.matrix(&xs, &xs)?;
        let kqx = problem.kernel.matrix(&nodes, &xs)?;
        Ok(FitContext {
            problem,
            order,
            xs,
            ys,
            nodes,
            node_cache,
            kxx,
            kqx,
        })
    }

    /// Maps a canonical-order vector back to the user's data order.
    pub(crate) fn to_user_order(&self, v: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (k, &orig) in self.order.iter().enumerate() {
            out[orig] = v[k];
        }
        out
    }

    /// Residual y - y_s(X, theta) in canonical order.
    pub(crate) fn residual(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let mut r = DVector::zeros(self.xs.len());
        for (k, x) in self.xs.iter().enumerate() {
            let v = self.problem.model.eval(x, theta)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "model output is not finite at x={x:?}, theta={theta:?}"
                )));
            }
            r[k] = self.ys[k] - v;
        }
        Ok(r)
    }

    /// Gradient matrix (q x len(points)) of the model at the given points.
    pub(crate) fn grad_matrix(&self, points: &[Vec<f64>], theta: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.problem.model.q();
        let mut m = DMatrix::zeros(q, points.len());
        for (j, x) in points.iter().enumerate() {
            let g = self.problem.model.grad_theta(x, theta)?;
            for i in 0..q {
                if !g[i].is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite sensitivity {i} at x={x:?}, theta={theta:?}"
                    )));
                }
                m[(i, j)] = g[i];
            }
        }
        Ok(m)
    }

    /// Sensitivity-span basis at theta, plus its orthonormal values at the
    /// data points.
    pub(crate) fn basis_at(&self, theta: &[f64]) -> Result<(SubspaceBasis, DMatrix<f64>)> {
        let q = self.problem.model.q();
        let grads_nodes = self.grad_matrix(&self.nodes, theta)?;
        let model = self.problem.model.clone();
        let theta_vec = theta.to_vec();
        let funcs: Vec<RealFn> = (0..q)
            .map(|k| {
                let m = model.clone();
                let th = theta_vec.clone();
                real_fn(move |x: &[f64]| match m.grad_theta(x, &th) {
                    Ok(g) => g[k],
                    Err(_) => f64::NAN,
                })
            })
            .collect();
        let basis = SubspaceBasis::from_values(
            funcs,
            grads_nodes,
            &self.problem.rule,
            self.problem.rank_tol,
        )?;
        let grads_data = self.grad_matrix(&self.xs, theta)?;
        let ex = basis.ortho_from_raw(&grads_data);
        Ok((basis, ex))
    }

    /// Projected kernel and gram at theta against the cached blocks.
    pub(crate) fn projected_at(
        &self,
        theta: &[f64],
    ) -> Result<(Arc<ProjectedKernel>, DMatrix<f64>)> {
        let (basis, ex) = self.basis_at(theta)?;
        let pk = ProjectedKernel::with_node_cache(
            self.problem.kernel.clone(),
            basis,
            self.problem.rule.clone(),
            &self.node_cache,
        )?;
        let gram = pk.gram_from_blocks(&self.kxx, &self.kqx, &ex);
        Ok((Arc::new(pk), gram))
    }
}

// ---------------------------------------------------------------------------
// Profile solving.

fn clamped_eigen(gram: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut eig = SymmetricEigen::new(gram.clone());
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    eig
}

enum GramStrategy {
    /// Sensitivity span fixed in theta: one gram, one eigendecomposition.
    Fixed {
        eig: SymmetricEigen<f64, nalgebra::Dyn>,
        gram: DMatrix<f64>,
        pk: Option<Arc<ProjectedKernel>>,
    },
    /// Reassemble the projected gram at every theta.
    PerTheta,
}

pub(crate) struct SolveDetail {
    pub(crate) objective: f64,
    pub(crate) alpha: DVector<f64>,
    pub(crate) rss: f64,
    pub(crate) hat_trace: f64,
    pub(crate) condition: f64,
    pub(crate) pk: Option<Arc<ProjectedKernel>>,
}

/// Profile-objective engine for one problem and one kernel mode.
pub(crate) struct ThetaProfiler<'a> {
    pub(crate) ctx: &'a FitContext<'a>,
    strategy: GramStrategy,
    pub(crate) jitter_events: usize,
    pub(crate) max_jitter: f64,
    pub(crate) drop_events: usize,
    pub(crate) evals: usize,
}

impl<'a> ThetaProfiler<'a> {
    pub(crate) fn new(ctx: &'a FitContext<'a>, projected: bool) -> Result<Self> {
        let strategy = if !projected {
            GramStrategy::Fixed {
                eig: clamped_eigen(&ctx.kxx),
                gram: ctx.kxx.clone(),
                pk: None,
            }
        } else if ctx.problem.model.constant_sensitivities() {
            let center = center_of(ctx.problem.model.theta_bounds());
            let (pk, gram) = ctx.projected_at(&center)?;
            GramStrategy::Fixed {
                eig: clamped_eigen(&gram),
                gram,
                pk: Some(pk),
            }
        } else {
            GramStrategy::PerTheta
        };
        Ok(ThetaProfiler {
            ctx,
            strategy,
            jitter_events: 0,
            max_jitter: 0.0,
            drop_events: 0,
            evals: 0,
        })
    }

    /// The gram this profiler would use at theta (fixed or reassembled).
    pub(crate) fn gram_at(&mut self, theta: &[f64]) -> Result<DMatrix<f64>> {
        match &self.strategy {
            GramStrategy::Fixed { gram, .. } => Ok(gram.clone()),
            GramStrategy::PerTheta => {
                let (pk, gram) = self.ctx.projected_at(theta)?;
                if !pk.basis().dropped().is_empty() {
                    self.drop_events += 1;
                }
                Ok(gram)
            }
        }
    }

    pub(crate) fn objective(&mut self, theta: &[f64], lambda: f64) -> Result<f64> {
        self.evals += 1;
        let n = self.ctx.xs.len() as f64;
        let r = self.ctx.residual(theta)?;
        match &self.strategy {
            GramStrategy::Fixed { eig, .. } => {
                let z = eig.eigenvectors.transpose() * &r;
                let nl = n * lambda;
                Ok(lambda
                    * z.iter()
                        .zip(eig.eigenvalues.iter())
                        .map(|(&zi, &di)| zi * zi / (di + nl))
                        .sum::<f64>())
            }
            GramStrategy::PerTheta => {
                let (pk, gram) = self.ctx.projected_at(theta)?;
                if !pk.basis().dropped().is_empty() {
                    self.drop_events += 1;
                }
                let (chol, _jit) = self.chol_shifted(&gram, n * lambda)?;
                let alpha = chol.solve(&r);
                Ok(lambda * r.dot(&alpha))
            }
        }
    }

    /// Full solve at (theta, lambda), with the pieces needed for variance
    /// estimates and prediction.
    pub(crate) fn solve_full(&mut self, theta: &[f64], lambda: f64) -> Result<SolveDetail> {
        let n = self.ctx.xs.len() as f64;
        let nl = n * lambda;
        let r = self.ctx.residual(theta)?;
        match &self.strategy {
            GramStrategy::Fixed { eig, pk, .. } => {
                let z = eig.eigenvectors.transpose() * &r;
                let scaled = DVector::from_fn(z.len(), |i, _| z[i] / (eig.eigenvalues[i] + nl));
                let alpha = &eig.eigenvectors * &scaled;
                let objective = lambda * r.dot(&alpha);
                let rss = scaled.iter().map(|&s| (nl * s) * (nl * s)).sum();
                let hat_trace = eig
                    .eigenvalues
                    .iter()
                    .map(|&d| d / (d + nl))
                    .sum();
                let dmax = eig.eigenvalues.max();
                let dmin = eig.eigenvalues.min();
                Ok(SolveDetail {
                    objective,
                    alpha,
                    rss,
                    hat_trace,
                    condition: (dmax + nl) / (dmin + nl),
                    pk: pk.clone(),
                })
            }
            GramStrategy::PerTheta => {
                let (pk, gram) = self.ctx.projected_at(theta)?;
                let (chol, jit) = self.chol_shifted(&gram, nl)?;
                let alpha = chol.solve(&r);
                let objective = lambda * r.dot(&alpha);
                let fitted = &gram * &alpha;
                let rss = (&r - fitted).norm_squared();
                let inv = chol.inverse();
                let hat_trace = gram.nrows() as f64 - (nl + jit) * inv.trace();
                let ldiag: Vec<f64> = (0..gram.nrows()).map(|i| chol.l_dirty()[(i, i)]).collect();
                let lmax = ldiag.iter().cloned().fold(0.0, f64::max);
                let lmin = ldiag.iter().cloned().fold(f64::INFINITY, f64::min);
                Ok(SolveDetail {
                    objective,
                    alpha,
                    rss,
                    hat_trace,
                    condition: (lmax / lmin).powi(2),
                    pk: Some(pk),
                })
            }
        }
    }

    /// Cholesky of gram + shift I, escalating a relative jitter on failure.
    fn chol_shifted(
        &mut self,
        gram: &DMatrix<f64>,
        shift: f64,
    ) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
        let n = gram.nrows();
        let mean_diag = (gram.trace() / n as f64 + shift).abs();
        let mut jitter_rel = 0.0_f64;
        loop {
            let jit = jitter_rel * mean_diag;
            let mut m = gram.clone();
            for i in 0..n {
                m[(i, i)] += shift + jit;
            }
            if let Some(chol) = Cholesky::new(m) {
                if jitter_rel > 0.0 {
                    self.jitter_events += 1;
                    self.max_jitter = self.max_jitter.max(jit);
                }
                return Ok((chol, jit));
            }
            jitter_rel = if jitter_rel == 0.0 {
                self.ctx.problem.jitter_rel.max(1e-14)
            } else {
                jitter_rel * 10.0
            };
            if jitter_rel > 1e-6 {
                let eig = gram.symmetric_eigenvalues();
                return Err(Error::IllConditioned(format!(
                    "factorization failed after jitter escalation to 1e-6 relative; \
                     eigenvalue range [{:.3e}, {:.3e}], shift {shift:.3e}",
                    eig.min(),
                    eig.max()
                )));
            }
        }
    }
}

fn center_of(bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds.iter().map(|&(a, b)| 0.5 * (a + b)).collect()
}

fn check_theta_in_bounds(theta: &[f64], bounds: &[(f64, f64)]) -> Result<()> {
    if theta.len() != bounds.len() {
        return Err(Error::Validation(format!(
            "theta has dimension {}, expected {}",
            theta.len(),
            bounds.len()
        )));
    }
    for (i, (&t, &(a, b))) in theta.iter().zip(bounds).enumerate() {
        if !(t >= a && t <= b) {
            return Err(Error::Validation(format!(
                "theta[{i}] = {t} outside [{a}, {b}]"
            )));
        }
    }
    Ok(())
}

/// Exact inner solve of the penalized fit at fixed (theta, lambda): returns
/// the objective value and the representer coefficients (data order).
pub fn profile_objective(
    problem: &CalibrationProblem,
    theta: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_theta_in_bounds(theta, problem.model.theta_bounds())?;
    if !(lambda > 0.0) {
        return Err(Error::Validation(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let ctx = FitContext::new(problem)?;
    let mut profiler = ThetaProfiler::new(&ctx, true)?;
    // The public entry point always takes the factorization path, whatever
    // the model reports about its sensitivities.
    profiler.strategy = GramStrategy::PerTheta;
    let detail = profiler.solve_full(theta, lambda)?;
    Ok((detail.objective, ctx.to_user_order(&detail.alpha)))
}

// ---------------------------------------------------------------------------
// GCV.

/// GCV score per grid lambda given the gram eigenvalues and rotated
/// residual.
fn gcv_scores(
    eigvals: &DVector<f64>,
    z: &DVector<f64>,
    n: usize,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let nf = n as f64;
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let nl = nf * lambda;
        let mut rss = 0.0;
        let mut trace_res = 0.0;
        for (&d, &zi) in eigvals.iter().zip(z.iter()) {
            let shrink = nl / (d + nl);
            rss += (shrink * zi).powi(2);
            trace_res += shrink;
        }
        if !(trace_res > 0.0) {
            return Err(Error::Degenerate(format!(
                "trace(I - A) = {trace_res} at lambda = {lambda}: lambda too small for this gram"
            )));
        }
        let score = nf * rss / (trace_res * trace_res);
        if !score.is_finite() {
            return Err(Error::Numeric(format!(
                "GCV score is not finite at lambda = {lambda}"
            )));
        }
        out.push((lambda, score));
    }
    Ok(out)
}

fn gcv_argmin(trace: &[(f64, f64)]) -> (f64, f64) {
    let best = trace
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty grid");
    *best
}

/// Selects lambda by generalized cross validation at a pilot theta,
/// with the projected gram at that theta. Returns the argmin and the full
/// (lambda, score) trace.
pub fn gcv_select(
    problem: &CalibrationProblem,
    theta_pilot: &[f64],
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    check_theta_in_bounds(theta_pilot, problem.model.theta_bounds())?;
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Validation(
            "gcv grid must be nonempty with positive entries".into(),
        ));
    }
    let ctx = FitContext::new(problem)?;
    let mut profiler = ThetaProfiler::new(&ctx, true)?;
    gcv_with_profiler(&mut profiler, theta_pilot, grid)
}

fn gcv_with_profiler(
    profiler: &mut ThetaProfiler<'_>,
    theta: &[f64],
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let gram = profiler.gram_at(theta)?;
    let eig = clamped_eigen(&gram);
    let r = profiler.ctx.residual(theta)?;
    let z = eig.eigenvectors.transpose() * r;
    let trace = gcv_scores(&eig.eigenvalues, &z, profiler.ctx.xs.len(), grid)?;
    let (best, _) = gcv_argmin(&trace);
    Ok((best, trace))
}

// ---------------------------------------------------------------------------
// Fits.

struct RidgeFit {
    lambda: f64,
    alpha: DVector<f64>,
    zeta_nodes: DVector<f64>,
    sigma2: f64,
    gcv_trace: Vec<(f64, f64)>,
}

/// Step 1 of the L2 method: kernel ridge on the raw responses with the
/// base kernel.
fn ridge_smooth(ctx: &FitContext<'_>) -> Result<RidgeFit> {
    let n = ctx.xs.len();
    let eig = clamped_eigen(&ctx.kxx);
    let z = eig.eigenvectors.transpose() * &ctx.ys;
    let (lambda, gcv_trace) = match &ctx.problem.lambda {
        LambdaPolicy::Fixed { value } => (*value, Vec::new()),
        LambdaPolicy::Gcv { grid } => {
            let trace = gcv_scores(&eig.eigenvalues, &z, n, grid)?;
            (gcv_argmin(&trace).0, trace)
        }
    };
    let nl = n as f64 * lambda;
    let scaled = DVector::from_fn(n, |i, _| z[i] / (eig.eigenvalues[i] + nl));
    let alpha = &eig.eigenvectors * &scaled;
    let rss: f64 = scaled.iter().map(|&s| (nl * s) * (nl * s)).sum();
    let hat_trace: f64 = eig.eigenvalues.iter().map(|&d| d / (d + nl)).sum();
    let denom = (n as f64 - hat_trace).max(f64::MIN_POSITIVE);
    let zeta_nodes = &ctx.kqx * &alpha;
    Ok(RidgeFit {
        lambda,
        alpha,
        zeta_nodes,
        sigma2: (rss / denom).max(0.0),
        gcv_trace,
    })
}

/// Two-step L2 calibration: ridge-smooth the responses with the base
/// kernel, then minimize the quadrature L2 distance between the smoother
/// and the simulator over theta.
pub fn fit_l2(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    let ctx = FitContext::new(problem)?;
    fit_l2_with_ctx(&ctx)
}

fn fit_l2_with_ctx(ctx: &FitContext<'_>) -> Result<CalibrationResult> {
    let problem = ctx.problem;
    let ridge = ridge_smooth(ctx)?;
    let rule = &problem.rule;
    let weights = rule.weights();
    let zeta_nodes = ridge.zeta_nodes.clone();
    let model = problem.model.clone();
    let nodes = ctx.nodes.clone();
    let mut evals = 0usize;
    let mut objective = |theta: &[f64]| -> Result<f64> {
        evals += 1;
        let mut acc = 0.0;
        for (q, x) in nodes.iter().enumerate() {
            let v = model.eval(x, theta)?;
            let d = zeta_nodes[q] - v;
            acc += weights[q] * d * d;
        }
        Ok(acc)
    };
    let bounds = problem.model.theta_bounds().to_vec();
    let extra = vec![center_of(&bounds)];
    let (best, starts) = multi_start(&mut objective, &bounds, &extra, &problem.optimizer)?;
    let theta_hat = best.best.clone();

    // At the optimum the fitted discrepancy is orthogonal to the
    // sensitivities by the first-order condition; report the residual.
    let grads = ctx.grad_matrix(&ctx.nodes, &theta_hat)?;
    let mut ortho = vec![0.0; problem.model.q()];
    for (q, x) in ctx.nodes.iter().enumerate() {
        let d = zeta_nodes[q] - problem.model.eval(x, &theta_hat)?;
        for (i, o) in ortho.iter_mut().enumerate() {
            *o += weights[q] * d * grads[(i, q)];
        }
    }

    let diagnostics = Diagnostics {
        boundary_warning: near_boundary(&theta_hat, &bounds),
        pilot_theta: Vec::new(),
        starts,
        objective_evals: evals,
        ..Default::default()
    };
    Ok(CalibrationResult {
        method: Method::L2,
        theta_hat,
        alpha_hat: ctx.to_user_order(&ridge.alpha),
        lambda_used: ridge.lambda,
        objective: best.value,
        sigma2_hat: ridge.sigma2,
        ortho_residual: ortho,
        gcv_trace: ridge.gcv_trace,
        diagnostics,
    })
}

/// Projected-kernel calibration: L2 pilot, GCV at the pilot, multi-start
/// profile minimization, then one lambda refresh and re-optimization.
pub fn fit_pk(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    fit_smoother(problem, true)
}

/// KO-mode: the same pipeline with the unprojected kernel gram. The
/// smoothing parameter must be fixed by the caller, so prior-sensitivity
/// sweeps stay honest.
pub fn fit_ko_mode(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    if !matches!(problem.lambda, LambdaPolicy::Fixed { .. }) {
        return Err(Error::Validation(
            "ko-mode requires a fixed lambda (set lambda.policy = \"fixed\")".into(),
        ));
    }
    fit_smoother(problem, false)
}

fn fit_smoother(problem: &CalibrationProblem, projected: bool) -> Result<CalibrationResult> {
    let ctx = FitContext::new(problem)?;
    let pilot = fit_l2_with_ctx(&ctx)?;
    let pilot_theta = pilot.theta_hat.clone();
    let bounds = problem.model.theta_bounds().to_vec();
    let mut profiler = ThetaProfiler::new(&ctx, projected)?;

    let (mut lambda, mut gcv_trace, passes) = match &problem.lambda {
        LambdaPolicy::Fixed { value } => (*value, Vec::new(), 1),
        LambdaPolicy::Gcv { grid } => {
            let (l, t) = gcv_with_profiler(&mut profiler, &pilot_theta, grid)?;
            (l, t, 2)
        }
    };

    let mut extra = vec![pilot_theta.clone()];
    let mut best: Option<StartReport> = None;
    let mut starts: Vec<StartReport> = Vec::new();
    for pass in 0..passes {
        let (b, s) = {
            let prof = &mut profiler;
            let mut obj = |theta: &[f64]| prof.objective(theta, lambda);
            multi_start(&mut obj, &bounds, &extra, &problem.optimizer)?
        };
        if pass + 1 < passes {
            if let LambdaPolicy::Gcv { grid } = &problem.lambda {
                let (l, t) = gcv_with_profiler(&mut profiler, &b.best, grid)?;
                lambda = l;
                gcv_trace = t;
            }
            extra.push(b.best.clone());
        }
        best = Some(b);
        starts = s;
    }
    let best = best.expect("at least one pass");
    let theta_hat = best.best.clone();
    let detail = profiler.solve_full(&theta_hat, lambda)?;

    let n = ctx.xs.len() as f64;
    let denom = (n - detail.hat_trace).max(f64::MIN_POSITIVE);
    let sigma2 = (detail.rss / denom).max(0.0);
    let ortho = ortho_residual(&ctx, &detail, &theta_hat)?;

    let rank_drops = detail
        .pk
        .as_ref()
        .map(|pk| pk.basis().dropped().to_vec())
        .unwrap_or_default();
    let diagnostics = Diagnostics {
        rank_drops,
        drop_events: profiler.drop_events,
        jitter_events: profiler.jitter_events,
        max_jitter: profiler.max_jitter,
        condition_estimate: detail.condition,
        boundary_warning: near_boundary(&theta_hat, &bounds),
        pilot_theta,
        starts,
        objective_evals: profiler.evals,
    };
    Ok(CalibrationResult {
        method: if projected { Method::Pk } else { Method::KoMode },
        theta_hat,
        alpha_hat: ctx.to_user_order(&detail.alpha),
        lambda_used: lambda,
        objective: detail.objective,
        sigma2_hat: sigma2,
        ortho_residual: ortho,
        gcv_trace,
        diagnostics,
    })
}

/// Quadrature inner products of the fitted discrepancy with each raw
/// sensitivity at theta-hat.
fn ortho_residual(
    ctx: &FitContext<'_>,
    detail: &SolveDetail,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let rule = &ctx.problem.rule;
    let delta_nodes: DVector<f64> = match &detail.pk {
        Some(pk) if pk.rank() > 0 => {
            let ex = pk.basis().ortho_from_raw(&ctx.grad_matrix(&ctx.xs, theta)?);
            let kgqx = pk.cross_nodes_data(&ctx.node_cache, &ctx.kqx, &ex);
            kgqx * &detail.alpha
        }
        _ => &ctx.kqx * &detail.alpha,
    };
    let grads = ctx.grad_matrix(&ctx.nodes, theta)?;
    let weights = rule.weights();
    let mut out = vec![0.0; ctx.problem.model.q()];
    for q in 0..rule.len() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += weights[q] * delta_nodes[q] * grads[(i, q)];
        }
    }
    Ok(out)
}

fn near_boundary(theta: &[f64], bounds: &[(f64, f64)]) -> bool {
    theta.iter().zip(bounds).any(|(&t, &(a, b))| {
        let tol = 1e-6 * (b - a);
        t - a <= tol || b - t <= tol
    })
}

// ---------------------------------------------------------------------------
// Asymptotic covariance.

/// Plug-in asymptotic covariance of the calibration estimator:
/// `(4 sigma^2 / n) V^-1 W V^-1`, with `V` the uniform-measure average of
/// the second theta-derivative of the squared distance to `zeta` and `W`
/// the average outer product of the sensitivities. Second derivatives of
/// the model come from nested central differences of its gradient.
pub fn asymptotic_covariance(
    problem: &CalibrationProblem,
    theta: &[f64],
    sigma2: f64,
    zeta: &dyn Fn(&[f64]) -> f64,
) -> Result<DMatrix<f64>> {
    let bounds = problem.model.theta_bounds();
    check_theta_in_bounds(theta, bounds)?;
    for (i, (&t, &(a, b))) in theta.iter().zip(bounds).enumerate() {
        if t == a || t == b {
            return Err(Error::Validation(format!(
                "theta[{i}] sits on the parameter-box boundary; the normal \
                 approximation needs an interior point"
            )));
        }
    }
    let q = problem.model.q();
    let rule = &problem.rule;
    let model = problem.model.as_ref();
    let mut v = DMatrix::zeros(q, q);
    let mut w = DMatrix::zeros(q, q);
    let vol = problem.domain.volume();
    for (qi, x) in rule.nodes().enumerate() {
        let weight = rule.weights()[qi] / vol;
        let g = model.grad_theta(x, theta)?;
        let hess = grad_hessian(model, x, theta)?;
        let resid = zeta(x) - model.eval(x, theta)?;
        for a in 0..q {
            for b in 0..q {
                w[(a, b)] += weight * g[a] * g[b];
                v[(a, b)] += weight * (2.0 * g[a] * g[b] - 2.0 * resid * hess[(a, b)]);
            }
        }
    }
    v = (&v + v.transpose()) * 0.5;
    w = (&w + w.transpose()) * 0.5;
    let v_inv = v.clone().try_inverse().ok_or_else(|| {
        Error::Numeric("V is numerically singular; the covariance formula needs V > 0".into())
    })?;
    let n = problem.n() as f64;
    let sigma = (4.0 * sigma2 / n) * (&v_inv * &w * &v_inv);
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Hessian of the model in theta at one x, by central differences of the
/// gradient with boundary-clipped steps.
fn grad_hessian(
    model: &dyn ComputerModel,
    x: &[f64],
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let q = model.q();
    let bounds = model.theta_bounds();
    let base_h = f64::EPSILON.cbrt();
    let mut hess = DMatrix::zeros(q, q);
    let mut work = theta.to_vec();
    for j in 0..q {
        let (a, b) = bounds[j];
        let h = base_h * (1.0 + theta[j].abs());
        let up = h.min(b - theta[j]);
        let down = h.min(theta[j] - a);
        let (g_up, g_down, span) = if up > 0.0 && down > 0.0 {
            work[j] = theta[j] + up;
            let gu = model.grad_theta(x, &work)?;
            work[j] = theta[j] - down;
            let gd = model.grad_theta(x, &work)?;
            work[j] = theta[j];
            (gu, gd, up + down)
        } else if up > 0.0 {
            work[j] = theta[j] + up;
            let gu = model.grad_theta(x, &work)?;
            work[j] = theta[j];
            (gu, model.grad_theta(x, theta)?, up)
        } else {
            work[j] = theta[j] - down;
            let gd = model.grad_theta(x, &work)?;
            work[j] = theta[j];
            (model.grad_theta(x, theta)?, gd, down)
        };
        for i in 0..q {
            hess[(i, j)] = (g_up[i] - g_down[i]) / span;
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// Prediction.

/// Evaluates the fitted true-process estimate at arbitrary points.
///
/// Builds the per-method kernel caches once; prefer this over repeated
/// [`predict_zeta`] calls.
pub struct Predictor {
    method: Method,
    theta: Vec<f64>,
    alpha: Vec<f64>,
    xs: Vec<Vec<f64>>,
    model: Arc<dyn ComputerModel>,
    kernel: KernelSpec,
    domain: DomainSpec,
    pk: Option<Arc<ProjectedKernel>>,
}

impl Predictor {
    pub fn new(problem: &CalibrationProblem, result: &CalibrationResult) -> Result<Self> {
        let pk = if result.method == Method::Pk {
            let ctx = FitContext::new(problem)?;
            let (basis, _) = ctx.basis_at(&result.theta_hat)?;
            Some(Arc::new(ProjectedKernel::with_node_cache(
                problem.kernel.clone(),
                basis,
                problem.rule.clone(),
                &ctx.node_cache,
            )?))
        } else {
            None
        };
        Ok(Predictor {
            method: result.method,
            theta: result.theta_hat.clone(),
            alpha: result.alpha_hat.clone(),
            xs: problem.x.clone(),
            model: problem.model.clone(),
            kernel: problem.kernel.clone(),
            domain: problem.domain.clone(),
            pk,
        })
    }

    /// zeta-hat at one point.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::Validation(format!(
                "prediction point {x:?} lies outside the domain"
            )));
        }
        let spread: f64 = match (&self.method, &self.pk) {
            (Method::Pk, Some(pk)) => self
                .xs
                .iter()
                .zip(&self.alpha)
                .map(|(xj, &aj)| aj * pk.eval_inside(x, xj))
                .sum(),
            _ => self
                .xs
                .iter()
                .zip(&self.alpha)
                .map(|(xj, &aj)| aj * self.kernel.eval_unchecked(x, xj))
                .sum(),
        };
        let value = match self.method {
            Method::L2 => spread,
            _ => self.model.eval(x, &self.theta)? + spread,
        };
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "prediction at {x:?} is not finite"
            )));
        }
        Ok(value)
    }

    /// Quadrature L2(Omega) distance between `zeta` and the fitted estimate.
    pub fn l2_error(&self, zeta: &dyn Fn(&[f64]) -> f64, rule: &QuadratureRule) -> Result<f64> {
        let mut acc = 0.0;
        for (q, x) in rule.nodes().enumerate() {
            let d = zeta(x) - self.predict(x)?;
            acc += rule.weights()[q] * d * d;
        }
        Ok(acc.max(0.0).sqrt())
    }
}

/// zeta-hat(x) = y_s(x, theta-hat) + sum_j alpha_j K(x, x_j), with the
/// kernel the fit was built on. Convenience wrapper over [`Predictor`].
pub fn predict_zeta(
    result: &CalibrationResult,
    problem: &CalibrationProblem,
    x: &[f64],
) -> Result<f64> {
    Predictor::new(problem, result)?.predict(x)
}
