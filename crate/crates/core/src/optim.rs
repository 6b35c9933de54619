//! Bounded derivative-free minimization: Nelder-Mead with box clamping and
//! a Sobol multi-start wrapper.

use crate::sobol::SobolSeq;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Number of low-discrepancy start points; 0 means `max(8, 4q)`.
    pub starts: usize,
    /// Objective-evaluation budget per start.
    pub max_iters: usize,
    /// Simplex-diameter convergence tolerance (relative to box width).
    pub x_tol: f64,
    /// Objective-spread convergence tolerance.
    pub f_tol: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            starts: 0,
            max_iters: 400,
            x_tol: 1e-9,
            f_tol: 1e-12,
        }
    }
}

impl OptimizerSettings {
    pub fn effective_starts(&self, q: usize) -> usize {
        if self.starts == 0 {
            8.max(4 * q)
        } else {
            self.starts
        }
    }
}

/// Outcome of one local search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub best: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, &(a, b)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(a, b);
    }
}

/// Nelder-Mead restricted to a box: every trial point is clamped
/// coordinate-wise. Works for q = 1 (the simplex degenerates to a segment).
pub fn nelder_mead_box<F>(
    f: &mut F,
    x0: &[f64],
    bounds: &[(f64, f64)],
    settings: &OptimizerSettings,
) -> Result<StartReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let q = x0.len();
    assert_eq!(bounds.len(), q);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        let v = f(x)?;
        if v.is_nan() {
            return Err(Error::Numeric(format!("objective is NaN at {x:?}")));
        }
        Ok(v)
    };

    // Initial simplex: x0 plus inward-safe steps of 5% of each box width.
    let mut start = x0.to_vec();
    clamp_into(&mut start, bounds);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..q {
        let (a, b) = bounds[i];
        let step = 0.05 * (b - a);
        let mut p = start.clone();
        p[i] = if p[i] + step <= b { p[i] + step } else { p[i] - step };
        simplex.push(p);
    }
    let mut values = Vec::with_capacity(q + 1);
    for p in &simplex {
        values.push(eval(p, &mut evals)?);
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < settings.max_iters {
        // Order simplex by objective value.
        let mut order: Vec<usize> = (0..=q).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let revalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = reordered;
        values = revalues;

        let spread = values[q] - values[0];
        let diam = (0..q)
            .map(|i| {
                let (a, b) = bounds[i];
                let lo = simplex.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
                let hi = simplex.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
                (hi - lo) / (b - a).max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max);
        if spread <= settings.f_tol * (1.0 + values[0].abs()) && diam <= settings.x_tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst point.
        let mut centroid = vec![0.0; q];
        for p in simplex.iter().take(q) {
            for (c, &pi) in centroid.iter_mut().zip(p) {
                *c += pi / q as f64;
            }
        }
        let worst = simplex[q].clone();
        let mut reflected: Vec<f64> = centroid
            .iter()
            .zip(&worst)
            .map(|(&c, &w)| c + alpha * (c - w))
            .collect();
        clamp_into(&mut reflected, bounds);
        let fr = eval(&reflected, &mut evals)?;

        if fr < values[0] {
            let mut expanded: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(&c, &w)| c + gamma * (c - w))
                .collect();
            clamp_into(&mut expanded, bounds);
            let fe = eval(&expanded, &mut evals)?;
            if fe < fr {
                simplex[q] = expanded;
                values[q] = fe;
            } else {
                simplex[q] = reflected;
                values[q] = fr;
            }
        } else if fr < values[q - 1] {
            simplex[q] = reflected;
            values[q] = fr;
        } else {
            let mut contracted: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(&c, &w)| c + rho * (w - c))
                .collect();
            clamp_into(&mut contracted, bounds);
            let fc = eval(&contracted, &mut evals)?;
            if fc < values[q] {
                simplex[q] = contracted;
                values[q] = fc;
            } else {
                // Shrink toward the best vertex.
                for i in 1..=q {
                    let best = simplex[0].clone();
                    for (pj, &bj) in simplex[i].iter_mut().zip(&best) {
                        *pj = bj + sigma * (*pj - bj);
                    }
                    values[i] = eval(&simplex[i].clone(), &mut evals)?;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..=q).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    Ok(StartReport {
        start,
        best: simplex[order[0]].clone(),
        value: values[order[0]],
        evals,
        converged,
    })
}

/// Low-discrepancy start points inside a box, the degenerate first Sobol
/// point skipped.
pub fn sobol_starts(bounds: &[(f64, f64)], count: usize) -> Vec<Vec<f64>> {
    let q = bounds.len();
    SobolSeq::points(q, count, 1)
        .into_iter()
        .map(|p| {
            p.iter()
                .zip(bounds)
                .map(|(&u, &(a, b))| a + (b - a) * u)
                .collect()
        })
        .collect()
}

/// Multi-start Nelder-Mead: Sobol starts plus caller-provided extras.
///
/// A start whose search errors out (objective failure in some corner of
/// the box) is recorded as unconverged rather than aborting the others;
/// only when no start converges does the whole call fail, carrying the
/// per-start trace.
pub fn multi_start<F>(
    f: &mut F,
    bounds: &[(f64, f64)],
    extra_starts: &[Vec<f64>],
    settings: &OptimizerSettings,
) -> Result<(StartReport, Vec<StartReport>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let q = bounds.len();
    let mut starts = sobol_starts(bounds, settings.effective_starts(q));
    starts.extend(extra_starts.iter().cloned());
    let mut reports = Vec::with_capacity(starts.len());
    let mut errors: Vec<String> = Vec::new();
    for s in &starts {
        match nelder_mead_box(f, s, bounds, settings) {
            Ok(report) => reports.push(report),
            Err(e) => {
                errors.push(format!("start {s:?}: {e}"));
                reports.push(StartReport {
                    start: s.clone(),
                    best: s.clone(),
                    value: f64::INFINITY,
                    evals: 0,
                    converged: false,
                });
            }
        }
    }
    let best = reports
        .iter()
        .filter(|r| r.converged)
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .cloned();
    match best {
        Some(b) => Ok((b, reports)),
        None => {
            let mut trace: Vec<String> = reports
                .iter()
                .filter(|r| r.value.is_finite())
                .map(|r| {
                    format!(
                        "start {:?}: value {:.6e} after {} evals, not converged",
                        r.start, r.value, r.evals
                    )
                })
                .collect();
            trace.extend(errors);
            Err(Error::Optimization(format!(
                "no start converged; per-start trace:\n{}",
                trace.join("\n")
            )))
        }
    }
}
