//! The experimental region and its numerical L2 structure.
//!
//! Everything downstream (projections, native-space probes, oracle targets)
//! reduces to integrals over the region, so this module owns the quadrature
//! rule and the inner products it induces. Integrals come in two flavors:
//! plain Lebesgue ([`QuadratureRule::integrate`]) and volume-normalized
//! ([`QuadratureRule::mean`], the uniform-design expectation); callers pick
//! explicitly.

use crate::gauss::gauss_legendre;
use crate::sobol::{SobolSeq, MAX_DIM};
use crate::{Error, RealFn, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Hard cap on quadrature nodes; tensor rules grow as level^dim.
pub const MAX_QUAD_NODES: usize = 1 << 20;

/// A closed hyperrectangle in R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    bounds: Vec<(f64, f64)>,
}

impl DomainSpec {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Validation("domain must have dimension >= 1".into()));
        }
        for (j, &(a, b)) in bounds.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::Validation(format!(
                    "domain bound {j} must satisfy a < b with finite endpoints, got [{a}, {b}]"
                )));
            }
        }
        Ok(DomainSpec { bounds })
    }

    /// The unit cube `[0,1]^d`.
    pub fn unit(dim: usize) -> Self {
        DomainSpec::new(vec![(0.0, 1.0); dim]).expect("unit cube is valid")
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|&(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.bounds)
                .all(|(&xi, &(a, b))| xi >= a && xi <= b)
    }

    pub fn center(&self) -> Vec<f64> {
        self.bounds.iter().map(|&(a, b)| 0.5 * (a + b)).collect()
    }
}

/// How quadrature nodes are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureKind {
    /// Tensor-product Gauss-Legendre; `level` nodes per dimension, exact for
    /// per-dimension polynomial degree <= 2*level - 1.
    TensorGauss,
    /// Sobol points with equal volume-normalized weights; 2^level nodes.
    SobolQmc,
}

impl QuadratureKind {
    /// Gauss for low dimension, Sobol above it: exactness where tensor
    /// products are affordable, dimension robustness elsewhere.
    pub fn default_for_dim(dim: usize) -> QuadratureKind {
        if dim <= 3 {
            QuadratureKind::TensorGauss
        } else {
            QuadratureKind::SobolQmc
        }
    }
}

/// A fixed set of nodes and nonnegative weights whose sum is the domain
/// volume.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    kind: QuadratureKind,
    level: usize,
    domain: DomainSpec,
    nodes: Vec<f64>, // flat, len = Q * dim
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, q: usize) -> &[f64] {
        let d = self.domain.dim();
        &self.nodes[q * d..(q + 1) * d]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.domain.dim())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn kind(&self) -> QuadratureKind {
        self.kind
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Plain integral of `f` over the domain.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.nodes()
            .zip(&self.weights)
            .map(|(x, &w)| w * f(x))
            .sum()
    }

    /// Volume-normalized integral: the expectation under the uniform design.
    pub fn mean<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.integrate(f) / self.domain.volume()
    }

    /// Values of `f` at all nodes, with a finiteness check.
    pub fn values<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        for (q, x) in self.nodes().enumerate() {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite function value {v} at quadrature node {q} ({x:?})"
                )));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Builds a quadrature rule over `domain`.
pub fn build_quadrature(
    domain: &DomainSpec,
    kind: QuadratureKind,
    level: usize,
) -> Result<QuadratureRule> {
    if level < 1 {
        return Err(Error::Validation(format!(
            "quadrature level must be >= 1, got {level}"
        )));
    }
    let d = domain.dim();
    match kind {
        QuadratureKind::TensorGauss => {
            let q_total = (level as u128).checked_pow(d as u32);
            match q_total {
                Some(q) if q <= MAX_QUAD_NODES as u128 => {}
                _ => {
                    return Err(Error::Resource(format!(
                        "tensor-gauss rule needs level^dim = {level}^{d} nodes, \
                         exceeding the budget of {MAX_QUAD_NODES}"
                    )))
                }
            }
            let q_total = level.pow(d as u32);
            let (x1, w1) = gauss_legendre(level);
            // Per-dimension affine map from [-1,1] to [a,b].
            let mapped: Vec<(Vec<f64>, Vec<f64>)> = domain
                .bounds
                .iter()
                .map(|&(a, b)| {
                    let half = 0.5 * (b - a);
                    let mid = 0.5 * (a + b);
                    (
                        x1.iter().map(|&x| mid + half * x).collect(),
                        w1.iter().map(|&w| half * w).collect(),
                    )
                })
                .collect();
            let mut nodes = Vec::with_capacity(q_total * d);
            let mut weights = Vec::with_capacity(q_total);
            let mut idx = vec![0usize; d];
            loop {
                let mut w = 1.0;
                for j in 0..d {
                    nodes.push(mapped[j].0[idx[j]]);
                    w *= mapped[j].1[idx[j]];
                }
                weights.push(w);
                // Odometer increment over the tensor grid.
                let mut j = 0;
                loop {
                    idx[j] += 1;
                    if idx[j] < level {
                        break;
                    }
                    idx[j] = 0;
                    j += 1;
                    if j == d {
                        debug_assert_eq!(weights.len(), q_total);
                        return finish_rule(kind, level, domain.clone(), nodes, weights);
                    }
                }
            }
        }
        QuadratureKind::SobolQmc => {
            if d > MAX_DIM {
                return Err(Error::Validation(format!(
                    "sobol-qmc supports dimension <= {MAX_DIM}, got {d}"
                )));
            }
            let q_total = 1usize
                .checked_shl(level as u32)
                .filter(|&q| q <= MAX_QUAD_NODES)
                .ok_or_else(|| {
                    Error::Resource(format!(
                        "sobol-qmc rule needs 2^{level} nodes, exceeding the budget of \
                         {MAX_QUAD_NODES}"
                    ))
                })?;
            let pts = SobolSeq::points(d, q_total, 0);
            let mut nodes = Vec::with_capacity(q_total * d);
            for p in pts {
                for (j, &(a, b)) in domain.bounds.iter().enumerate() {
                    nodes.push(a + (b - a) * p[j]);
                }
            }
            let w = domain.volume() / q_total as f64;
            finish_rule(kind, level, domain.clone(), nodes, vec![w; q_total])
        }
    }
}

fn finish_rule(
    kind: QuadratureKind,
    level: usize,
    domain: DomainSpec,
    nodes: Vec<f64>,
    weights: Vec<f64>,
) -> Result<QuadratureRule> {
    let rule = QuadratureRule {
        kind,
        level,
        domain,
        nodes,
        weights,
    };
    let sum: f64 = rule.weights.iter().sum();
    let vol = rule.domain.volume();
    debug_assert!(
        (sum - vol).abs() <= 1e-12 * vol.abs(),
        "weight sum {sum} != volume {vol}"
    );
    Ok(rule)
}

/// L2(Omega) inner product of two functions under the rule.
pub fn l2_inner<F, G>(f: F, g: G, rule: &QuadratureRule) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    let mut acc = 0.0;
    for (q, x) in rule.nodes().enumerate() {
        let (fv, gv) = (f(x), g(x));
        if !fv.is_finite() || !gv.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value at quadrature node {q} ({x:?}): f={fv}, g={gv}"
            )));
        }
        acc += rule.weights[q] * fv * gv;
    }
    Ok(acc)
}

/// L2(Omega) norm of a function under the rule.
pub fn l2_norm<F: Fn(&[f64]) -> f64>(f: F, rule: &QuadratureRule) -> Result<f64> {
    Ok(l2_inner(&f, &f, rule)?.max(0.0).sqrt())
}

/// Result of L2 Gram-Schmidt: orthonormal combinations of the inputs.
///
/// Row `i` of `coeffs` gives `e_i = sum_k coeffs[(i,k)] * g_k`. Inputs whose
/// residual fell below the rank tolerance are listed in `dropped`.
#[derive(Clone)]
pub struct OrthonormalBasis {
    funcs: Vec<RealFn>,
    coeffs: DMatrix<f64>,
    dropped: Vec<usize>,
    /// Orthonormalized values at the rule's nodes, rank x Q.
    node_values: DMatrix<f64>,
}

impl std::fmt::Debug for OrthonormalBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OrthonormalBasis")
            .field("rank", &self.rank())
            .field("input_len", &self.input_len())
            .field("dropped", &self.dropped)
            .finish()
    }
}

impl OrthonormalBasis {
    pub fn rank(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn input_len(&self) -> usize {
        self.funcs.len()
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn node_values(&self) -> &DMatrix<f64> {
        &self.node_values
    }

    /// Evaluates orthonormal function `i` at an arbitrary point.
    pub fn eval(&self, i: usize, x: &[f64]) -> f64 {
        (0..self.funcs.len())
            .map(|k| self.coeffs[(i, k)] * (self.funcs[k])(x))
            .sum()
    }

    /// Orthonormal values from raw input values: given `raw` as an
    /// input_len x P matrix of g_k at P points, returns rank x P.
    pub fn apply_to_raw(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        &self.coeffs * raw
    }
}

/// Orthonormalizes `funcs` in L2(Omega) by modified Gram-Schmidt with
/// reorthogonalization on the quadrature nodes.
///
/// Directions whose residual norm falls below `rank_tol` times the largest
/// input norm are dropped and reported. Errors if every input is
/// numerically null.
pub fn gram_schmidt_l2(
    funcs: Vec<RealFn>,
    rule: &QuadratureRule,
    rank_tol: f64,
) -> Result<OrthonormalBasis> {
    if funcs.is_empty() {
        return Err(Error::Validation("gram_schmidt_l2 needs at least one function".into()));
    }
    let m = funcs.len();
    let q = rule.len();
    let mut raw = DMatrix::zeros(m, q);
    for (k, f) in funcs.iter().enumerate() {
        let vals = rule.values(|x| f(x))?;
        for (j, v) in vals.into_iter().enumerate() {
            raw[(k, j)] = v;
        }
    }
    gram_schmidt_from_values(funcs, raw, rule, rank_tol)
}

/// Same as [`gram_schmidt_l2`] but with input node values already computed
/// (`raw` is input_len x Q).
pub fn gram_schmidt_from_values(
    funcs: Vec<RealFn>,
    raw: DMatrix<f64>,
    rule: &QuadratureRule,
    rank_tol: f64,
) -> Result<OrthonormalBasis> {
    let m = funcs.len();
    let q = rule.len();
    assert_eq!(raw.nrows(), m);
    assert_eq!(raw.ncols(), q);
    let sqrt_w: Vec<f64> = rule.weights().iter().map(|&w| w.sqrt()).collect();

    // Work in the weighted coordinates where the L2 inner product is the
    // plain dot product.
    let mut vectors: Vec<Vec<f64>> = (0..m)
        .map(|k| (0..q).map(|j| raw[(k, j)] * sqrt_w[j]).collect())
        .collect();
    let input_norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let max_norm = input_norms.iter().cloned().fold(0.0, f64::max);
    if !(max_norm > 0.0) {
        return Err(Error::Degenerate(
            "all inputs to gram_schmidt_l2 are numerically null".into(),
        ));
    }
    let drop_below = rank_tol * max_norm;

    let mut basis_rows: Vec<Vec<f64>> = Vec::new(); // orthonormal, weighted coords
    let mut coeff_rows: Vec<Vec<f64>> = Vec::new(); // combinations of inputs
    let mut dropped = Vec::new();
    for k in 0..m {
        let mut v = std::mem::take(&mut vectors[k]);
        let mut c = vec![0.0; m];
        c[k] = 1.0;
        // Two orthogonalization passes keep the residual orthogonal to
        // working precision even when inputs are nearly dependent.
        for _ in 0..2 {
            for (e, ce) in basis_rows.iter().zip(coeff_rows.iter()) {
                let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                for (vi, ei) in v.iter_mut().zip(e) {
                    *vi -= dot * ei;
                }
                for (ci, cei) in c.iter_mut().zip(ce) {
                    *ci -= dot * cei;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= drop_below {
            dropped.push(k);
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        for ci in c.iter_mut() {
            *ci /= norm;
        }
        basis_rows.push(v);
        coeff_rows.push(c);
    }
    if basis_rows.is_empty() {
        return Err(Error::Degenerate(
            "gram_schmidt_l2 retained no directions (all below rank tolerance)".into(),
        ));
    }

    let rank = basis_rows.len();
    let coeffs = DMatrix::from_fn(rank, m, |i, k| coeff_rows[i][k]);
    // Unweight to recover plain node values of the orthonormal functions.
    let node_values = DMatrix::from_fn(rank, q, |i, j| {
        if sqrt_w[j] > 0.0 {
            basis_rows[i][j] / sqrt_w[j]
        } else {
            coeff_rows[i]
                .iter()
                .enumerate()
                .map(|(k, &c)| c * raw[(k, j)])
                .sum()
        }
    });
    Ok(OrthonormalBasis {
        funcs,
        coeffs,
        dropped,
        node_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real_fn;
    use approx::assert_relative_eq;

    fn unit_rule(level: usize) -> QuadratureRule {
        build_quadrature(&DomainSpec::unit(1), QuadratureKind::TensorGauss, level).unwrap()
    }

    #[test]
    fn weights_sum_to_volume() {
        // ([0,1], tensor-gauss, 3): Q = 3, weight sum 1.
        let r = unit_rule(3);
        assert_eq!(r.len(), 3);
        assert_relative_eq!(r.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-14);

        let dom = DomainSpec::new(vec![(-1.0, 2.0), (0.0, 0.5)]).unwrap();
        let r = build_quadrature(&dom, QuadratureKind::SobolQmc, 5).unwrap();
        assert_eq!(r.len(), 32);
        assert_relative_eq!(r.weights().iter().sum::<f64>(), 1.5, epsilon = 1e-13);
    }

    #[test]
    fn tensor_nodes_inside_square() {
        // ([0,1]^2, tensor-gauss, 4): 16 nodes, all inside (0,1)^2.
        let dom = DomainSpec::unit(2);
        let r = build_quadrature(&dom, QuadratureKind::TensorGauss, 4).unwrap();
        assert_eq!(r.len(), 16);
        for x in r.nodes() {
            assert!(x.iter().all(|&xi| xi > 0.0 && xi < 1.0));
        }
    }

    #[test]
    fn degree_three_exactness_at_level_two() {
        // Analytic antiderivative oracle: integral of x^3 over [0,1] = 1/4.
        let r = unit_rule(2);
        assert_relative_eq!(r.integrate(|x| x[0].powi(3)), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn budget_and_level_errors() {
        let dom = DomainSpec::unit(3);
        let err = build_quadrature(&dom, QuadratureKind::TensorGauss, 200).unwrap_err();
        assert!(matches!(err, Error::Resource(_)), "{err}");
        assert!(err.to_string().contains("1048576"));
        let err = build_quadrature(&dom, QuadratureKind::TensorGauss, 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn inner_product_examples() {
        // Constant integrates to the volume.
        let dom = DomainSpec::unit(2);
        let r = build_quadrature(&dom, QuadratureKind::TensorGauss, 4).unwrap();
        assert_relative_eq!(l2_inner(|_| 1.0, |_| 1.0, &r).unwrap(), 1.0, epsilon = 1e-14);

        // Analytic antiderivative oracle: integral of x over [0,1] = 1/2.
        let r1 = unit_rule(1);
        assert_relative_eq!(l2_inner(|x| x[0], |_| 1.0, &r1).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn quadrature_matches_dense_riemann_oracle() {
        // sin * cos on [0,2] against a 1e6-point midpoint Riemann oracle.
        let dom = DomainSpec::new(vec![(0.0, 2.0)]).unwrap();
        let r = build_quadrature(&dom, QuadratureKind::TensorGauss, 24).unwrap();
        let quad = l2_inner(|x| x[0].sin(), |x| x[0].cos(), &r).unwrap();
        let n = 1_000_000;
        let h = 2.0 / n as f64;
        let riemann: f64 = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) * h;
                h * x.sin() * x.cos()
            })
            .sum();
        assert!((quad - riemann).abs() < 1e-8, "quad {quad} vs riemann {riemann}");
    }

    #[test]
    fn non_finite_value_reports_node() {
        let r = unit_rule(3);
        let err = l2_inner(|x| 1.0 / (x[0] - x[0]), |_| 1.0, &r).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("node"));
    }

    #[test]
    fn quadrature_self_convergence() {
        // |I_L - I_2L| shrinks along refinement for a smooth integrand.
        let dom = DomainSpec::new(vec![(0.0, 2.0)]).unwrap();
        let f = |x: &[f64]| (1.5 * x[0]).sin() * (-x[0]).exp();
        let mut prev_gap = f64::INFINITY;
        for level in [2usize, 4, 8] {
            let ra = build_quadrature(&dom, QuadratureKind::TensorGauss, level).unwrap();
            let rb = build_quadrature(&dom, QuadratureKind::TensorGauss, 2 * level).unwrap();
            let gap = (ra.integrate(f) - rb.integrate(f)).abs();
            assert!(gap <= prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-12);
    }

    #[test]
    fn gram_schmidt_normalizes_single_function() {
        let r = unit_rule(8);
        let basis =
            gram_schmidt_l2(vec![real_fn(|x: &[f64]| 2.0 * x[0] + 1.0)], &r, 1e-10).unwrap();
        assert_eq!(basis.rank(), 1);
        let ip = l2_inner(|x| basis.eval(0, x), |x| basis.eval(0, x), &r).unwrap();
        assert_relative_eq!(ip, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_schmidt_linear_pair_matches_symbolic_oracle() {
        // Symbolic Gram-Schmidt of {1, x} on [0,1]: e1 = 1, e2 = sqrt(12)(x - 1/2).
        let r = unit_rule(8);
        let basis = gram_schmidt_l2(
            vec![real_fn(|_| 1.0), real_fn(|x: &[f64]| x[0])],
            &r,
            1e-10,
        )
        .unwrap();
        assert_eq!(basis.rank(), 2);
        let s12 = 12.0_f64.sqrt();
        for &x in &[0.0, 0.3, 0.71, 1.0] {
            assert_relative_eq!(basis.eval(0, &[x]), 1.0, epsilon = 1e-12);
            assert_relative_eq!(basis.eval(1, &[x]), s12 * (x - 0.5), epsilon = 1e-10);
        }
    }

    #[test]
    fn gram_schmidt_drops_dependent_input() {
        let r = unit_rule(8);
        let g = |x: &[f64]| x[0].exp();
        let basis = gram_schmidt_l2(
            vec![real_fn(g), real_fn(move |x: &[f64]| 2.0 * g(x))],
            &r,
            1e-10,
        )
        .unwrap();
        assert_eq!(basis.rank(), 1);
        assert_eq!(basis.dropped(), &[1]);
    }

    #[test]
    fn gram_schmidt_null_input_errors() {
        let r = unit_rule(4);
        let err = gram_schmidt_l2(vec![real_fn(|_| 0.0)], &r, 1e-10).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn orthonormality_residual_bound() {
        // A deliberately ill-conditioned monomial family still comes out
        // orthonormal to 1e-10.
        let r = unit_rule(16);
        let funcs: Vec<RealFn> = (0..6)
            .map(|k| real_fn(move |x: &[f64]| x[0].powi(k)))
            .collect();
        let basis = gram_schmidt_l2(funcs, &r, 1e-10).unwrap();
        let m = basis.rank();
        for i in 0..m {
            for j in 0..m {
                let ip = l2_inner(|x| basis.eval(i, x), |x| basis.eval(j, x), &r).unwrap();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (ip - target).abs() <= 1e-10,
                    "<e{i},e{j}> = {ip}"
                );
            }
        }
    }

    #[test]
    fn gram_schmidt_idempotent_on_orthonormal_inputs() {
        let r = unit_rule(8);
        let s12 = 12.0_f64.sqrt();
        let basis = gram_schmidt_l2(
            vec![
                real_fn(|_| 1.0),
                real_fn(move |x: &[f64]| s12 * (x[0] - 0.5)),
            ],
            &r,
            1e-10,
        )
        .unwrap();
        let c = basis.coeffs();
        for i in 0..2 {
            for k in 0..2 {
                let target = if i == k { 1.0 } else { 0.0 };
                assert!((c[(i, k)] - target).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn sobol_rule_nodes_inside_domain() {
        let dom = DomainSpec::new(vec![(0.0, 1.0); 5]).unwrap();
        let r = build_quadrature(&dom, QuadratureKind::SobolQmc, 10).unwrap();
        assert_eq!(r.len(), 1024);
        for x in r.nodes() {
            assert!(dom.contains(x));
        }
        // Smooth integrand: QMC mean should be close to the true integral.
        let est = r.mean(|x| x.iter().sum::<f64>());
        assert!((est - 2.5).abs() < 5e-3, "estimate {est}");
    }
}
