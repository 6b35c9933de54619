//! Projected kernels: removing a finite-dimensional subspace from a kernel.
//!
//! Given a kernel `K` and a subspace `G` of L2(Omega) with orthonormal basis
//! `{e_i}`, the projected kernel is
//!
//! ```text
//! K_G(s,t) = K(s,t) - sum_i e_i(s) h_i(t) - sum_j e_j(t) h_j(s)
//!            + sum_ij e_i(s) e_j(t) M_ij
//! h_i(t) = integral K(x,t) e_i(x) dx
//! M_ij  = double integral K(x,y) e_i(x) e_j(y) dx dy
//! ```
//!
//! `K_G` annihilates `G` under the integral operator `kappa` and stays
//! positive definite for every shipped kernel family. All integrals are
//! discretized with the quadrature rule the basis was built on, which makes
//! the annihilation identities hold to roundoff rather than quadrature
//! accuracy.

use crate::domain::{gram_schmidt_from_values, OrthonormalBasis, QuadratureRule};
use crate::kernel::KernelSpec;
use crate::{Error, RealFn, Result};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Above this node count the kernel-at-nodes block is not materialized;
/// double integrals fall back to streaming over node pairs.
const KQQ_DENSE_LIMIT: usize = 3000;

/// Node count used for the spectral (rho_max) estimate; larger rules are
/// subsampled.
const RHO_MAX_NODES: usize = 1024;

/// Anything that can be evaluated as a covariance at a pair of points
/// inside the domain.
pub trait Covariance: Send + Sync {
    fn cov(&self, s: &[f64], t: &[f64]) -> f64;
}

impl Covariance for KernelSpec {
    fn cov(&self, s: &[f64], t: &[f64]) -> f64 {
        self.eval_unchecked(s, t)
    }
}

impl Covariance for ProjectedKernel {
    fn cov(&self, s: &[f64], t: &[f64]) -> f64 {
        self.eval_inside(s, t)
    }
}

/// The subspace `G` spanned by a set of raw functions (typically the
/// simulator's theta-sensitivities at a fixed theta), together with its
/// Gram matrix and an L2-orthonormalized basis.
#[derive(Clone)]
pub struct SubspaceBasis {
    raw: Vec<RealFn>,
    /// Gram matrix of the raw functions (the "distance matrix" E).
    gram: DMatrix<f64>,
    /// None when the subspace is numerically null (rank 0).
    ortho: Option<OrthonormalBasis>,
    dropped: Vec<usize>,
}

impl std::fmt::Debug for SubspaceBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubspaceBasis")
            .field("raw_dim", &self.raw.len())
            .field("rank", &self.rank())
            .field("dropped", &self.dropped)
            .finish()
    }
}

impl SubspaceBasis {
    /// Builds the basis from raw functions, evaluating them on the rule's
    /// nodes. A numerically null input set yields a rank-0 basis rather
    /// than an error: downstream the projected kernel then degenerates to
    /// the base kernel.
    pub fn from_funcs(funcs: Vec<RealFn>, rule: &QuadratureRule, rank_tol: f64) -> Result<Self> {
        let q = rule.len();
        let mut raw_vals = DMatrix::zeros(funcs.len(), q);
        for (k, f) in funcs.iter().enumerate() {
            let vals = rule.values(|x| f(x))?;
            for (j, v) in vals.into_iter().enumerate() {
                raw_vals[(k, j)] = v;
            }
        }
        Self::from_values(funcs, raw_vals, rule, rank_tol)
    }

    /// Same, with node values of the raw functions already computed
    /// (`raw_vals` is funcs.len() x Q).
    pub fn from_values(
        funcs: Vec<RealFn>,
        raw_vals: DMatrix<f64>,
        rule: &QuadratureRule,
        rank_tol: f64,
    ) -> Result<Self> {
        let m = funcs.len();
        let gram = {
            let mut wv = raw_vals.clone();
            for (j, &w) in rule.weights().iter().enumerate() {
                for i in 0..m {
                    wv[(i, j)] *= w;
                }
            }
            let g = &wv * raw_vals.transpose();
            (&g + g.transpose()) * 0.5
        };
        match gram_schmidt_from_values(funcs.clone(), raw_vals, rule, rank_tol) {
            Ok(ortho) => {
                let dropped = ortho.dropped().to_vec();
                Ok(SubspaceBasis {
                    raw: funcs,
                    gram,
                    ortho: Some(ortho),
                    dropped,
                })
            }
            Err(Error::Degenerate(_)) => Ok(SubspaceBasis {
                dropped: (0..m).collect(),
                raw: funcs,
                gram,
                ortho: None,
            }),
            Err(e) => Err(e),
        }
    }

    /// The empty subspace; projection through it is the identity.
    pub fn empty() -> Self {
        SubspaceBasis {
            raw: Vec::new(),
            gram: DMatrix::zeros(0, 0),
            ortho: None,
            dropped: Vec::new(),
        }
    }

    /// Number of retained orthonormal directions.
    pub fn rank(&self) -> usize {
        self.ortho.as_ref().map_or(0, |o| o.rank())
    }

    /// Number of raw input functions.
    pub fn raw_dim(&self) -> usize {
        self.raw.len()
    }

    /// Indices of raw inputs dropped as numerically dependent.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// Gram matrix of the raw functions.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn eval_raw(&self, k: usize, x: &[f64]) -> f64 {
        (self.raw[k])(x)
    }

    /// Evaluates orthonormal basis function `i` at a point.
    pub fn eval_ortho(&self, i: usize, x: &[f64]) -> f64 {
        self.ortho
            .as_ref()
            .expect("rank-0 basis has no orthonormal functions")
            .eval(i, x)
    }

    /// Orthonormal values at the rule's nodes (rank x Q).
    pub fn node_values(&self) -> Option<&DMatrix<f64>> {
        self.ortho.as_ref().map(|o| o.node_values())
    }

    /// Orthonormal values at arbitrary points (rank x len(points)).
    pub fn values_at(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        let rank = self.rank();
        let mut raw_vals = DMatrix::zeros(self.raw.len(), points.len());
        for (k, f) in self.raw.iter().enumerate() {
            for (j, p) in points.iter().enumerate() {
                raw_vals[(k, j)] = f(p);
            }
        }
        if rank == 0 {
            return DMatrix::zeros(0, points.len());
        }
        self.ortho.as_ref().unwrap().apply_to_raw(&raw_vals)
    }

    /// Orthonormal values from precomputed raw values (raw_dim x P).
    pub fn ortho_from_raw(&self, raw_vals: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.ortho {
            Some(o) => o.apply_to_raw(raw_vals),
            None => DMatrix::zeros(0, raw_vals.ncols()),
        }
    }
}

/// Per-(kernel, rule) cache of the theta-independent kernel blocks: the
/// kernel at node pairs and the spectral estimate of `kappa(K, .)`.
pub struct NodeKernelCache {
    kernel: KernelSpec,
    kqq: Option<DMatrix<f64>>,
    rho_max: f64,
}

impl NodeKernelCache {
    pub fn new(kernel: &KernelSpec, rule: &QuadratureRule) -> Result<Self> {
        let q = rule.len();
        let kqq = if q <= KQQ_DENSE_LIMIT {
            let mut m = DMatrix::zeros(q, q);
            for i in 0..q {
                let xi = rule.node(i);
                m[(i, i)] = kernel.eval(xi, xi)?;
                for j in (i + 1)..q {
                    let v = kernel.eval_unchecked(xi, rule.node(j));
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            Some(m)
        } else {
            None
        };
        let rho_max = estimate_rho_max(kernel, rule, kqq.as_ref());
        Ok(NodeKernelCache {
            kernel: kernel.clone(),
            kqq,
            rho_max,
        })
    }

    /// Largest Nystrom eigenvalue of the integral operator `kappa(K, .)`.
    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    pub fn kqq(&self) -> Option<&DMatrix<f64>> {
        self.kqq.as_ref()
    }

    /// h values at the rule's own nodes: (WE) Kqq, rank x Q.
    pub(crate) fn h_nodes(&self, rule: &QuadratureRule, wnode: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kqq {
            Some(kqq) => wnode * kqq,
            None => {
                let q = rule.len();
                let rank = wnode.nrows();
                let mut out = DMatrix::zeros(rank, q);
                for p in 0..q {
                    let xp = rule.node(p);
                    for j in 0..q {
                        let k = self.kernel.eval_unchecked(xp, rule.node(j));
                        for i in 0..rank {
                            out[(i, j)] += k * wnode[(i, p)];
                        }
                    }
                }
                out
            }
        }
    }

    /// M = (WE) Kqq (WE)^T for weighted node basis `wnode` (rank x Q).
    fn double_integrals(&self, rule: &QuadratureRule, wnode: &DMatrix<f64>) -> DMatrix<f64> {
        let m = match &self.kqq {
            Some(kqq) => wnode * kqq * wnode.transpose(),
            None => {
                let q = rule.len();
                let rank = wnode.nrows();
                // Stream rows of Kqq: T[q x rank] = Kqq (WE)^T.
                let mut t = DMatrix::zeros(q, rank);
                for p in 0..q {
                    let xp = rule.node(p);
                    for j in 0..q {
                        let k = self.kernel.eval_unchecked(xp, rule.node(j));
                        for i in 0..rank {
                            t[(p, i)] += k * wnode[(i, j)];
                        }
                    }
                }
                wnode * t
            }
        };
        (&m + m.transpose()) * 0.5
    }
}

/// Power iteration on the symmetrically weighted kernel matrix; subsampled
/// when the rule is large. Deterministic start vector.
fn estimate_rho_max(
    kernel: &KernelSpec,
    rule: &QuadratureRule,
    kqq: Option<&DMatrix<f64>>,
) -> f64 {
    let q = rule.len();
    let (idx, wscale): (Vec<usize>, f64) = if q <= RHO_MAX_NODES {
        ((0..q).collect(), 1.0)
    } else {
        let stride = q.div_ceil(RHO_MAX_NODES);
        let idx: Vec<usize> = (0..q).step_by(stride).collect();
        let kept: f64 = idx.iter().map(|&i| rule.weights()[i]).sum();
        let total: f64 = rule.weights().iter().sum();
        (idx, total / kept)
    };
    let m = idx.len();
    let sw: Vec<f64> = idx
        .iter()
        .map(|&i| (rule.weights()[i] * wscale).sqrt())
        .collect();
    let s = DMatrix::from_fn(m, m, |a, b| {
        let v = match kqq {
            Some(k) => k[(idx[a], idx[b])],
            None => kernel.eval_unchecked(rule.node(idx[a]), rule.node(idx[b])),
        };
        sw[a] * v * sw[b]
    });
    let mut v = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    let mut rho = 0.0;
    for _ in 0..200 {
        let sv = &s * &v;
        let norm = sv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = sv / norm;
        let new_rho = (next.transpose() * &s * &next)[(0, 0)];
        let done = (new_rho - rho).abs() <= 1e-12 * new_rho.abs();
        rho = new_rho;
        v = next;
        if done {
            break;
        }
    }
    rho
}

/// The projected kernel `K_G` with its quadrature caches.
pub struct ProjectedKernel {
    base: KernelSpec,
    basis: SubspaceBasis,
    rule: Arc<QuadratureRule>,
    /// Weighted orthonormal node values: wnode[(i,q)] = w_q e_i(x_q).
    wnode: DMatrix<f64>,
    /// Double integrals M_ij.
    m_mat: DMatrix<f64>,
    rho_max: f64,
}

impl ProjectedKernel {
    /// Projects `kernel` onto the orthogonal complement of the basis span.
    /// A rank-0 basis yields a pass-through object (`eval` equals the base
    /// kernel).
    pub fn new(
        kernel: KernelSpec,
        basis: SubspaceBasis,
        rule: Arc<QuadratureRule>,
    ) -> Result<Self> {
        let cache = NodeKernelCache::new(&kernel, &rule)?;
        Self::with_node_cache(kernel, basis, rule, &cache)
    }

    /// Same, reusing a theta-independent [`NodeKernelCache`]. The cache must
    /// have been built for the same kernel and rule.
    pub fn with_node_cache(
        kernel: KernelSpec,
        basis: SubspaceBasis,
        rule: Arc<QuadratureRule>,
        cache: &NodeKernelCache,
    ) -> Result<Self> {
        let rank = basis.rank();
        let wnode = match basis.node_values() {
            Some(e) => {
                let mut w = e.clone();
                for (j, &wq) in rule.weights().iter().enumerate() {
                    for i in 0..rank {
                        w[(i, j)] *= wq;
                    }
                }
                w
            }
            None => DMatrix::zeros(0, rule.len()),
        };
        let m_mat = if rank == 0 {
            DMatrix::zeros(0, 0)
        } else {
            cache.double_integrals(&rule, &wnode)
        };
        Ok(ProjectedKernel {
            base: kernel,
            basis,
            rule,
            wnode,
            m_mat,
            rho_max: cache.rho_max(),
        })
    }

    pub fn base(&self) -> &KernelSpec {
        &self.base
    }

    pub fn basis(&self) -> &SubspaceBasis {
        &self.basis
    }

    pub fn rule(&self) -> &Arc<QuadratureRule> {
        &self.rule
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }

    /// Double-integral matrix M (rank x rank).
    pub fn m_matrix(&self) -> &DMatrix<f64> {
        &self.m_mat
    }

    /// Largest Nystrom eigenvalue of `kappa(K, .)` for the base kernel.
    pub fn rho_max_estimate(&self) -> f64 {
        self.rho_max
    }

    fn check_inside(&self, x: &[f64]) -> Result<()> {
        if !self.rule.domain().contains(x) {
            return Err(Error::Validation(format!(
                "point {x:?} lies outside the projection domain"
            )));
        }
        Ok(())
    }

    /// `K_G(s, t)`. Points must lie in the domain: the projection integrals
    /// are domain-bound.
    pub fn eval(&self, s: &[f64], t: &[f64]) -> Result<f64> {
        self.check_inside(s)?;
        self.check_inside(t)?;
        Ok(self.eval_inside(s, t))
    }

    pub(crate) fn eval_inside(&self, s: &[f64], t: &[f64]) -> f64 {
        let k = self.base.eval_unchecked(s, t);
        let rank = self.rank();
        if rank == 0 {
            return k;
        }
        let es = self.ortho_at(s);
        let et = self.ortho_at(t);
        let hs = self.h_at(s);
        let ht = self.h_at(t);
        let cross = es.dot(&ht) + et.dot(&hs);
        let mm = (es.transpose() * &self.m_mat * &et)[(0, 0)];
        k - cross + mm
    }

    fn ortho_at(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.rank(), |i, _| self.basis.eval_ortho(i, x))
    }

    /// h_i(t) = integral K(x,t) e_i(x) dx, via the rule.
    fn h_at(&self, t: &[f64]) -> DVector<f64> {
        let q = self.rule.len();
        let kvec = DVector::from_fn(q, |j, _| self.base.eval_unchecked(self.rule.node(j), t));
        &self.wnode * kvec
    }

    /// Gram matrix of `K_G` at `points`. Rejects duplicate points (the
    /// matrix would be exactly singular) and points outside the domain.
    pub fn matrix(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for p in points {
            self.check_inside(p)?;
        }
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                if points[i] == points[j] {
                    return Err(Error::Validation(format!(
                        "duplicate design points at indices {i} and {j}"
                    )));
                }
            }
        }
        let kxx = self.base.matrix(points, points)?;
        if self.rank() == 0 {
            return Ok(kxx);
        }
        let nodes: Vec<Vec<f64>> = self.rule.nodes().map(|x| x.to_vec()).collect();
        let kqx = self.base.matrix(&nodes, points)?;
        let ex = self.basis.values_at(points);
        Ok(self.gram_from_blocks(&kxx, &kqx, &ex))
    }

    /// K_G between the rule's nodes and data points, from cached blocks:
    /// `kqx` is the base kernel Q x n block and `ex` the orthonormal basis
    /// at the data points.
    pub(crate) fn cross_nodes_data(
        &self,
        cache: &NodeKernelCache,
        kqx: &DMatrix<f64>,
        ex: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        if self.rank() == 0 {
            return kqx.clone();
        }
        let eq = self
            .basis
            .node_values()
            .expect("rank > 0 has node values");
        let hx = &self.wnode * kqx; // rank x n
        let hq = cache.h_nodes(&self.rule, &self.wnode); // rank x Q
        kqx - eq.transpose() * hx - hq.transpose() * ex
            + eq.transpose() * &self.m_mat * ex
    }

    /// Assembles the projected gram from precomputed blocks: `kxx` n x n,
    /// `kqx` Q x n (base kernel between nodes and points), `ex` rank x n
    /// (orthonormal basis at the points).
    pub fn gram_from_blocks(
        &self,
        kxx: &DMatrix<f64>,
        kqx: &DMatrix<f64>,
        ex: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        if self.rank() == 0 {
            return kxx.clone();
        }
        let h = &self.wnode * kqx; // rank x n, h_i(x_j)
        let cross = ex.transpose() * &h;
        let g = kxx - &cross - cross.transpose() + ex.transpose() * &self.m_mat * ex;
        (&g + g.transpose()) * 0.5
    }
}

/// `kappa(u, f)` evaluated at `at`: the integral of `u(at_k, y) f(y) dy`
/// under the rule.
pub fn kappa_apply<F: Fn(&[f64]) -> f64>(
    u: &dyn Covariance,
    f: F,
    rule: &QuadratureRule,
    at: &[Vec<f64>],
) -> Result<Vec<f64>> {
    for p in at {
        if !rule.domain().contains(p) {
            return Err(Error::Validation(format!(
                "evaluation point {p:?} lies outside the domain"
            )));
        }
    }
    let fv = rule.values(f)?;
    let w = rule.weights();
    Ok(at
        .iter()
        .map(|t| {
            rule.nodes()
                .enumerate()
                .map(|(q, y)| w[q] * u.cov(t, y) * fv[q])
                .sum()
        })
        .collect())
}

/// L2 split of a function into its component in the basis span and the
/// perpendicular remainder.
pub struct L2Split {
    /// Coefficients against the orthonormal basis.
    pub coeffs: Vec<f64>,
    /// P_G f, a member of the span.
    pub projected: RealFn,
    /// P_G^perp f = f - P_G f.
    pub residual: RealFn,
}

/// Projects `f` onto the basis span in L2(Omega).
pub fn project_l2(f: RealFn, basis: &SubspaceBasis, rule: &QuadratureRule) -> Result<L2Split> {
    let fv = rule.values(|x| f(x))?;
    let rank = basis.rank();
    let coeffs: Vec<f64> = match basis.node_values() {
        Some(e) => (0..rank)
            .map(|i| {
                rule.weights()
                    .iter()
                    .enumerate()
                    .map(|(q, &w)| w * e[(i, q)] * fv[q])
                    .sum()
            })
            .collect(),
        None => Vec::new(),
    };
    let basis_c = basis.clone();
    let coeffs_c = coeffs.clone();
    let projected: RealFn = Arc::new(move |x: &[f64]| {
        coeffs_c
            .iter()
            .enumerate()
            .map(|(i, c)| c * basis_c.eval_ortho(i, x))
            .sum()
    });
    let proj_c = projected.clone();
    let f_c = f.clone();
    let residual: RealFn = Arc::new(move |x: &[f64]| f_c(x) - proj_c(x));
    Ok(L2Split {
        coeffs,
        projected,
        residual,
    })
}

/// Quadratic-form probe behind the native-space norm comparison: both sides
/// are discretizations of `<kappa(., h), h>` in L2, with the projected and
/// the base kernel.
#[derive(Debug, Clone, Copy)]
pub struct NormProbe {
    /// sqrt(h_w^T K_G h_w)
    pub lhs: f64,
    /// sqrt(h_w^T K h_w)
    pub rhs_base: f64,
    pub ratio: f64,
}

/// Computes the norm probe for a function `h`.
pub fn norm_inequality_probe<F: Fn(&[f64]) -> f64>(
    pk: &ProjectedKernel,
    h: F,
    rule: &QuadratureRule,
) -> Result<NormProbe> {
    let hv = rule.values(h)?;
    let hw = DVector::from_fn(rule.len(), |q, _| rule.weights()[q] * hv[q]);
    // z = Kqq hw, streamed against the base kernel.
    let q = rule.len();
    let mut z = DVector::zeros(q);
    for p in 0..q {
        let xp = rule.node(p);
        let mut acc = 0.0;
        for j in 0..q {
            acc += pk.base.eval_unchecked(xp, rule.node(j)) * hw[j];
        }
        z[p] = acc;
    }
    let rhs2 = hw.dot(&z);
    if !(rhs2 > 0.0) {
        return Err(Error::Degenerate(format!(
            "base quadratic form is not positive ({rhs2}); h is numerically null"
        )));
    }
    let lhs2 = if pk.rank() == 0 {
        rhs2
    } else {
        let e_hw = match pk.basis.node_values() {
            Some(e) => e * &hw,
            None => DVector::zeros(0),
        };
        let wz = &pk.wnode * &z;
        rhs2 - 2.0 * e_hw.dot(&wz) + (e_hw.transpose() * &pk.m_mat * &e_hw)[(0, 0)]
    };
    let lhs = lhs2.max(0.0).sqrt();
    let rhs_base = rhs2.sqrt();
    Ok(NormProbe {
        lhs,
        rhs_base,
        ratio: lhs / rhs_base,
    })
}
