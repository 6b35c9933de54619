//! Stationary positive-definite kernels and their spectral densities.
//!
//! Every shipped family has a strictly positive spectral density, so the
//! projected kernels built from them stay positive definite.

use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "matern-1/2")]
    Matern12,
    #[serde(rename = "matern-3/2")]
    Matern32,
    #[serde(rename = "matern-5/2")]
    Matern52,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Matern12 => "matern-1/2",
            KernelFamily::Matern32 => "matern-3/2",
            KernelFamily::Matern52 => "matern-5/2",
        }
    }

    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Gaussian,
        KernelFamily::Matern12,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
    ];

    /// Matern smoothness parameter; `None` for the Gaussian family.
    fn nu(&self) -> Option<f64> {
        match self {
            KernelFamily::Gaussian => None,
            KernelFamily::Matern12 => Some(0.5),
            KernelFamily::Matern32 => Some(1.5),
            KernelFamily::Matern52 => Some(2.5),
        }
    }
}

/// A stationary kernel `K(s,t) = R(s-t)` with per-dimension lengthscales and
/// `R(0) = variance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Validation(format!(
                "kernel lengthscales must be positive and finite, got {lengthscales:?}"
            )));
        }
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Validation(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        Ok(KernelSpec {
            family,
            lengthscales,
            variance,
        })
    }

    /// Isotropic kernel on a `dim`-dimensional domain.
    pub fn isotropic(family: KernelFamily, dim: usize, lengthscale: f64, variance: f64) -> Result<Self> {
        KernelSpec::new(family, vec![lengthscale; dim], variance)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Validation(format!(
                "point dimension {} does not match kernel dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Scaled distance r with r^2 = sum ((s_j - t_j)/l_j)^2.
    fn scaled_r2(&self, s: &[f64], t: &[f64]) -> f64 {
        s.iter()
            .zip(t)
            .zip(&self.lengthscales)
            .map(|((&a, &b), &l)| {
                let d = (a - b) / l;
                d * d
            })
            .sum()
    }

    /// Kernel value `R(s - t)`.
    pub fn eval(&self, s: &[f64], t: &[f64]) -> Result<f64> {
        self.check_dim(s)?;
        self.check_dim(t)?;
        Ok(self.eval_unchecked(s, t))
    }

    pub(crate) fn eval_unchecked(&self, s: &[f64], t: &[f64]) -> f64 {
        let r2 = self.scaled_r2(s, t);
        let v = self.variance;
        match self.family {
            KernelFamily::Gaussian => v * (-0.5 * r2).exp(),
            KernelFamily::Matern12 => v * (-r2.sqrt()).exp(),
            KernelFamily::Matern32 => {
                let a = 3.0_f64.sqrt() * r2.sqrt();
                v * (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let r = r2.sqrt();
                let a = 5.0_f64.sqrt() * r;
                v * (1.0 + a + 5.0 * r2 / 3.0) * (-a).exp()
            }
        }
    }

    /// Cross-kernel matrix with entry `(i,j) = K(xs[i], ys[j])`.
    pub fn matrix(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for x in xs.iter().chain(ys) {
            self.check_dim(x)?;
        }
        Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
            self.eval_unchecked(&xs[i], &ys[j])
        }))
    }

    /// Spectral density: the Fourier transform of `R` at angular frequency
    /// `omega` (convention integral of R(x) exp(-i w.x) dx). Strictly
    /// positive for every shipped family.
    pub fn spectral_density(&self, omega: &[f64]) -> Result<f64> {
        self.check_dim(omega)?;
        let d = self.dim();
        // R(x) = variance * phi(|L x|) with L = diag(1/l): the transform is
        // variance * prod(l) * phi_d(|diag(l) w|).
        let scale: f64 = self.lengthscales.iter().product();
        let u2: f64 = omega
            .iter()
            .zip(&self.lengthscales)
            .map(|(&w, &l)| {
                let s = w * l;
                s * s
            })
            .sum();
        let df = d as f64;
        let density = match self.family.nu() {
            None => (2.0 * std::f64::consts::PI).powf(0.5 * df) * (-0.5 * u2).exp(),
            Some(nu) => {
                // 2^d pi^{d/2} Gamma(nu + d/2) (2 nu)^nu / Gamma(nu)
                //   * (2 nu + u^2)^{-(nu + d/2)}
                let c = 2.0_f64.powf(df)
                    * std::f64::consts::PI.powf(0.5 * df)
                    * gamma_half_integer(nu + 0.5 * df)
                    * (2.0 * nu).powf(nu)
                    / gamma_half_integer(nu);
                c * (2.0 * nu + u2).powf(-(nu + 0.5 * df))
            }
        };
        Ok(self.variance * scale * density)
    }
}

/// Gamma(z) for positive integers and half-integers, by recursion from
/// Gamma(1) = 1 and Gamma(1/2) = sqrt(pi).
fn gamma_half_integer(z: f64) -> f64 {
    let two_z = (2.0 * z).round();
    debug_assert!(
        ((2.0 * z) - two_z).abs() < 1e-12 && two_z >= 1.0,
        "gamma argument {z} is not a positive half-integer"
    );
    let mut n = two_z as u64; // z = n/2
    let mut acc = if n.is_multiple_of(2) {
        1.0
    } else {
        std::f64::consts::PI.sqrt()
    };
    while n > 2 {
        n -= 2;
        acc *= n as f64 / 2.0;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(family: KernelFamily) -> KernelSpec {
        KernelSpec::isotropic(family, 1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn value_at_zero_distance_is_variance() {
        for fam in KernelFamily::ALL {
            let k = KernelSpec::new(fam, vec![0.7, 1.3], 2.5).unwrap();
            let x = [0.2, -0.4];
            assert_eq!(k.eval(&x, &x).unwrap(), 2.5);
        }
    }

    #[test]
    fn closed_form_values_at_unit_distance() {
        // High-precision closed forms: gaussian exp(-1/2), matern-3/2
        // (1 + sqrt(3)) exp(-sqrt(3)).
        let g = spec(KernelFamily::Gaussian);
        assert_relative_eq!(
            g.eval(&[0.0], &[1.0]).unwrap(),
            0.6065306597126334,
            epsilon = 1e-15
        );
        let m32 = spec(KernelFamily::Matern32);
        let s3 = 3.0_f64.sqrt();
        assert_relative_eq!(
            m32.eval(&[0.0], &[1.0]).unwrap(),
            (1.0 + s3) * (-s3).exp(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            m32.eval(&[0.0], &[1.0]).unwrap(),
            0.4833577245965077,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = spec(KernelFamily::Gaussian);
        assert!(matches!(
            k.eval(&[0.0, 1.0], &[0.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn matrix_matches_elementwise_eval_exactly() {
        let k = KernelSpec::isotropic(KernelFamily::Gaussian, 1, 0.5, 1.0).unwrap();
        let pts = vec![vec![0.1], vec![0.45], vec![0.9]];
        let m = k.matrix(&pts, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                // Bit-exact agreement with the scalar path.
                assert_eq!(m[(i, j)], k.eval(&pts[i], &pts[j]).unwrap());
            }
        }
    }

    #[test]
    fn gram_matrices_are_positive_definite() {
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0]).collect();
        for fam in KernelFamily::ALL {
            let k = spec(fam);
            let m = k.matrix(&pts, &pts).unwrap();
            let eig = m.symmetric_eigenvalues();
            assert!(
                eig.iter().all(|&e| e > 0.0),
                "{}: min eigenvalue {}",
                fam.name(),
                eig.min()
            );
        }
    }

    #[test]
    fn single_point_matrix_is_variance() {
        let k = KernelSpec::isotropic(KernelFamily::Matern52, 1, 1.0, 3.0).unwrap();
        let m = k.matrix(&[vec![0.3]], &[vec![0.3]]).unwrap();
        assert_eq!(m[(0, 0)], 3.0);
    }

    #[test]
    fn spectral_density_exponential_closed_form() {
        // Symbolic Fourier oracle: FT of exp(-|x|) is 2 / (1 + w^2).
        let k = spec(KernelFamily::Matern12);
        assert_relative_eq!(
            k.spectral_density(&[1.0]).unwrap(),
            2.0 / (1.0 + 1.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            k.spectral_density(&[2.5]).unwrap(),
            2.0 / (1.0 + 6.25),
            epsilon = 1e-12
        );
    }

    #[test]
    fn spectral_density_maximal_at_zero() {
        for fam in KernelFamily::ALL {
            let k = KernelSpec::new(fam, vec![0.8, 1.1], 1.0).unwrap();
            let at0 = k.spectral_density(&[0.0, 0.0]).unwrap();
            assert!(at0 > 0.0);
            assert!(at0 >= k.spectral_density(&[0.5, -0.2]).unwrap());
        }
    }

    #[test]
    fn numeric_fourier_inversion_recovers_variance() {
        // R(0) = (2 pi)^-1 integral of the density; integrate with the
        // substitution w = tan(t) so heavy tails stay exact.
        let (nodes, weights) = crate::gauss::gauss_legendre(2000);
        for fam in KernelFamily::ALL {
            let k = KernelSpec::isotropic(fam, 1, 0.9, 1.7).unwrap();
            let mut acc = 0.0;
            for (&t, &w) in nodes.iter().zip(&weights) {
                let half_pi = 0.5 * std::f64::consts::PI;
                let u = half_pi * t; // map [-1,1] -> (-pi/2, pi/2)
                let sec2 = 1.0 / (u.cos() * u.cos());
                acc += w * half_pi * sec2 * k.spectral_density(&[u.tan()]).unwrap();
            }
            let r0 = acc / (2.0 * std::f64::consts::PI);
            assert!(
                (r0 - 1.7).abs() < 1e-4,
                "{}: inverted R(0) = {r0}",
                fam.name()
            );
        }
    }

    #[test]
    fn spectral_density_positive_at_random_frequencies() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for fam in KernelFamily::ALL {
            let k = KernelSpec::new(fam, vec![0.5, 2.0], 1.3).unwrap();
            // Stay inside the representable range: the gaussian density
            // underflows past |scaled omega| ~ 38.
            for _ in 0..1000 {
                let w = [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)];
                assert!(k.spectral_density(&w).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn matern_smoothness_ordering() {
        // At fixed r > 0 and common scale, rougher families decay faster.
        // The ordering is a small-distance property; past r ~ 2 the
        // gaussian tail undercuts the Matern family.
        for i in 1..=15 {
            let r = i as f64 * 0.1;
            let vals: Vec<f64> = [
                KernelFamily::Matern12,
                KernelFamily::Matern32,
                KernelFamily::Matern52,
                KernelFamily::Gaussian,
            ]
            .iter()
            .map(|&f| spec(f).eval(&[0.0], &[r]).unwrap())
            .collect();
            for w in vals.windows(2) {
                assert!(
                    w[0] <= w[1] + 1e-15,
                    "ordering violated at r = {r}: {vals:?}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn symmetry_is_exact(s in -5.0..5.0f64, t in -5.0..5.0f64, ls in 0.1..3.0f64) {
            for fam in KernelFamily::ALL {
                let k = KernelSpec::isotropic(fam, 1, ls, 1.0).unwrap();
                prop_assert_eq!(k.eval(&[s], &[t]).unwrap(), k.eval(&[t], &[s]).unwrap());
            }
        }

        #[test]
        fn stationarity_under_shifts(s in -2.0..2.0f64, t in -2.0..2.0f64, c in -10.0..10.0f64) {
            for fam in KernelFamily::ALL {
                let k = spec(fam);
                let a = k.eval(&[s], &[t]).unwrap();
                let b = k.eval(&[s + c], &[t + c]).unwrap();
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
