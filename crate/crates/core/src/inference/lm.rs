//! Bounded Levenberg–Marquardt on weighted residuals with central-difference
//! Jacobians.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// One free parameter in internal (display) units.
#[derive(Debug, Clone)]
pub(crate) struct FreeParam {
    pub name: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Typical magnitude; sets the difference step and step-size test.
    pub scale: f64,
}

impl FreeParam {
    pub fn new(name: impl Into<String>, value: f64, lower: f64, upper: f64, scale: f64) -> Self {
        Self {
            name: name.into(),
            value,
            lower,
            upper,
            scale,
        }
    }
}

/// Weighted residuals `(data − model)/σ` as a function of the free parameters.
pub(crate) trait Residuals: Sync {
    fn residuals(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmSettings {
    pub max_iterations: usize,
    /// Converged when `max_j |δ_j| / (|x_j| + scale_j)` drops below this.
    pub step_tolerance: f64,
    /// Relative difference step, times each parameter's scale.
    pub jacobian_step: f64,
    /// Smallest accepted ratio of singular values of the column-scaled Jacobian.
    pub degeneracy_threshold: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tolerance: 1e-8,
            jacobian_step: 1e-6,
            degeneracy_threshold: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub x: Vec<f64>,
    pub residuals: Vec<f64>,
    pub chi2: f64,
    /// Unscaled inverse of `JᵀJ` at the solution.
    pub inverse_normal: DMatrix<f64>,
    pub iterations: usize,
    pub step_norm: f64,
    pub converged: bool,
}

fn cost(r: &[f64]) -> f64 {
    let c: f64 = r.iter().map(|v| v * v).sum();
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

fn clamp(x: &mut [f64], params: &[FreeParam]) {
    for (v, p) in x.iter_mut().zip(params) {
        *v = v.clamp(p.lower, p.upper);
    }
}

fn jacobian<P: Residuals>(problem: &P, x: &[f64], params: &[FreeParam], rel_step: f64, m: usize) -> DMatrix<f64> {
    let columns: Vec<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|j| {
            let p = &params[j];
            let h = rel_step * p.scale.max(x[j].abs());
            let (lo, hi) = (
                (x[j] - h).max(p.lower),
                (x[j] + h).min(p.upper),
            );
            let mut xp = x.to_vec();
            xp[j] = hi;
            let rp = problem.residuals(&xp);
            xp[j] = lo;
            let rm = problem.residuals(&xp);
            let span = hi - lo;
            rp.iter().zip(&rm).map(|(a, b)| (a - b) / span).collect()
        })
        .collect();
    DMatrix::from_fn(m, x.len(), |i, j| columns[j][i])
}

/// Fails with [`Error::Degenerate`] when some parameter combination leaves
/// every residual unchanged.
fn check_rank(jac: &DMatrix<f64>, params: &[FreeParam], threshold: f64) -> Result<()> {
    let norms: Vec<f64> = jac.column_iter().map(|c| c.norm()).collect();
    let largest = norms.iter().cloned().fold(0.0, f64::max);
    if let Some(j) = norms.iter().position(|n| !(*n > threshold * largest)) {
        return Err(Error::Degenerate(format!(
            "the data do not constrain {}",
            params[j].name
        )));
    }
    let scaled = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| jac[(i, j)] / norms[j]);
    let svd = scaled.svd(false, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, s)| {
        if *s < acc.1 {
            (i, *s)
        } else {
            acc
        }
    });
    let smax = sv.max();
    if smin <= threshold * smax {
        let vt = svd.v_t.expect("requested V");
        let row = vt.row(imin);
        let mut terms: Vec<(usize, f64)> = row.iter().cloned().enumerate().filter(|(_, c)| c.abs() > 0.2).collect();
        terms.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
        let direction = terms
            .iter()
            .map(|(j, c)| format!("{:+.2}·{}", c, params[*j].name))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::Degenerate(format!(
            "unconstrained parameter combination {direction} (singular value ratio {:.1e})",
            smin / smax
        )));
    }
    Ok(())
}

fn invert_normal(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let normal = jac.transpose() * jac;
    let n = normal.nrows();
    normal
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| normal.pseudo_inverse(1e-14).ok())
        .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN))
}

pub(crate) fn minimize<P: Residuals>(problem: &P, params: &[FreeParam], settings: &LmSettings) -> Result<LmOutcome> {
    if params.is_empty() {
        return Err(Error::domain("no free parameters"));
    }
    let mut x: Vec<f64> = params.iter().map(|p| p.value).collect();
    clamp(&mut x, params);
    let mut r = problem.residuals(&x);
    let m = r.len();
    if m <= params.len() {
        return Err(Error::domain(format!(
            "{m} data points cannot determine {} parameters",
            params.len()
        )));
    }
    let mut chi2 = cost(&r);
    if !chi2.is_finite() {
        return Err(Error::domain("model is not finite at the initial parameters"));
    }

    let mut jac = jacobian(problem, &x, params, settings.jacobian_step, m);
    check_rank(&jac, params, settings.degeneracy_threshold)?;

    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut step_norm = f64::INFINITY;
    let n = x.len();

    while iterations < settings.max_iterations && !converged {
        iterations += 1;
        if chi2 == 0.0 {
            converged = true;
            step_norm = 0.0;
            break;
        }
        let normal = jac.transpose() * &jac;
        let gradient = jac.transpose() * DVector::from_column_slice(&r);
        let diag_floor = 1e-12 * normal.diagonal().max();
        let mut accepted = false;
        while !accepted {
            let mut damped = normal.clone();
            for j in 0..n {
                damped[(j, j)] += lambda * normal[(j, j)].max(diag_floor);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > 1e30 {
                    break;
                }
                continue;
            };
            let delta = chol.solve(&(-&gradient));
            let mut trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            clamp(&mut trial, params);
            let rel = trial
                .iter()
                .zip(&x)
                .zip(params)
                .map(|((t, v), p)| (t - v).abs() / (v.abs() + p.scale))
                .fold(0.0, f64::max);
            let r_trial = problem.residuals(&trial);
            let chi2_trial = cost(&r_trial);
            if chi2_trial < chi2 {
                x = trial;
                r = r_trial;
                chi2 = chi2_trial;
                lambda = (lambda * 0.1).max(1e-15);
                step_norm = rel;
                accepted = true;
                if rel < settings.step_tolerance {
                    converged = true;
                }
            } else {
                lambda *= 10.0;
                if rel < settings.step_tolerance {
                    // no further decrease available at this resolution
                    step_norm = rel;
                    converged = true;
                    break;
                }
                if lambda > 1e30 {
                    break;
                }
            }
        }
        if !accepted && !converged {
            break;
        }
        jac = jacobian(problem, &x, params, settings.jacobian_step, m);
    }

    check_rank(&jac, params, settings.degeneracy_threshold)?;
    Ok(LmOutcome {
        inverse_normal: invert_normal(&jac),
        x,
        residuals: r,
        chi2,
        iterations,
        step_norm,
        converged,
    })
}
