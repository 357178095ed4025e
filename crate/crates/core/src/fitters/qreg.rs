//! Linear quantile regression.
//!
//! The check loss is first minimized in a smoothed form by damped Newton
//! iterations while the smoothing width shrinks from 1e-2 to 1e-9 of the
//! response scale. The approximate solution seeds an exact descent over
//! basic solutions: a basis is a set of `p` observations fitted without
//! residual, and each step releases one of them along the edge with the
//! steepest negative directional derivative, moving to the minimum of the
//! piecewise-linear loss on that edge.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;

/// Check loss ρ_p(u) = u (p - 1{u < 0}).
pub fn rho(u: f64, p: f64) -> f64 {
    if u < 0.0 {
        u * (p - 1.0)
    } else {
        u * p
    }
}

pub fn check_loss(x: &DMatrix<f64>, y: &[f64], p: f64, beta: &DVector<f64>) -> f64 {
    let fitted = x * beta;
    y.iter().zip(fitted.iter()).map(|(yi, fi)| rho(yi - fi, p)).sum()
}

#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub coef: DVector<f64>,
    pub loss: f64,
    /// Observations interpolated by the solution.
    pub basis: Vec<usize>,
}

fn smoothed_loss(r: &DVector<f64>, p: f64, eps: f64) -> f64 {
    r.iter()
        .map(|&u| {
            let h = if u.abs() <= eps { u * u / (2.0 * eps) + eps / 2.0 } else { u.abs() };
            0.5 * (h + (2.0 * p - 1.0) * u)
        })
        .sum()
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let xtx = x.transpose() * x;
    linalg::spd_solve(&xtx, &(x.transpose() * y))
}

fn smoothed_newton(x: &DMatrix<f64>, y: &DVector<f64>, p: f64, mut beta: DVector<f64>, scale: f64) -> DVector<f64> {
    let k = x.ncols();
    for e in 2..=9 {
        let eps = scale * 10f64.powi(-e);
        for _ in 0..40 {
            let r = y - x * &beta;
            let mut grad = DVector::zeros(k);
            let mut hess = DMatrix::zeros(k, k);
            let mut in_band = 0usize;
            for (i, &u) in r.iter().enumerate() {
                let xi = x.row(i).transpose();
                let psi = 0.5 * ((u / eps).clamp(-1.0, 1.0) + 2.0 * p - 1.0);
                grad -= &xi * psi;
                if u.abs() < eps {
                    in_band += 1;
                    hess.ger(1.0 / (2.0 * eps), &xi, &xi, 1.0);
                }
            }
            if in_band < k {
                return beta;
            }
            let ridge = 1e-10 * hess.trace() / k as f64;
            for d in 0..k {
                hess[(d, d)] += ridge;
            }
            let Some(step) = linalg::spd_solve(&hess, &(-&grad)) else {
                return beta;
            };
            let f0 = smoothed_loss(&r, p, eps);
            let slope = grad.dot(&step);
            if slope >= 0.0 {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand = &beta + &step * t;
                let f1 = smoothed_loss(&(y - x * &cand), p, eps);
                if f1 <= f0 + 1e-4 * t * slope {
                    beta = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || (&step * t).amax() <= 1e-13 * (1.0 + beta.amax()) {
                break;
            }
        }
    }
    beta
}

/// Picks `k` observations with the smallest absolute residuals whose design
/// rows are linearly independent.
fn initial_basis(x: &DMatrix<f64>, r: &DVector<f64>) -> Option<Vec<usize>> {
    let k = x.ncols();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut basis = Vec::with_capacity(k);
    for i in order {
        let xi = x.row(i).transpose();
        let norm = xi.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = xi.clone();
        for q in &ortho {
            let c = q.dot(&v);
            v -= q * c;
        }
        let vn = v.norm();
        if vn > 1e-9 * norm {
            ortho.push(v / vn);
            basis.push(i);
            if basis.len() == k {
                return Some(basis);
            }
        }
    }
    None
}

fn basis_inverse(x: &DMatrix<f64>, basis: &[usize]) -> Option<DMatrix<f64>> {
    let k = x.ncols();
    let xh = DMatrix::from_fn(k, k, |a, b| x[(basis[a], b)]);
    xh.try_inverse()
}

/// Minimizes Σ ρ_p(y - xβ) exactly (up to floating point) over β.
///
/// `start` warm-starts the smoothing stage, e.g. with the solution at a
/// neighbouring quantile.
pub fn quantile_fit(x: &DMatrix<f64>, y: &[f64], p: f64, start: Option<&DVector<f64>>) -> Result<QuantileFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!("{} responses for {n} design rows", y.len())));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("quantile {p} outside (0, 1)")));
    }
    if n < k || linalg::rank(x, 1e-10) < k {
        return Err(Error::SingularDesign(format!("design of {n} rows does not have full column rank {k}")));
    }
    let yv = DVector::from_column_slice(y);
    let y_scale = {
        let mut s = y.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if s == 0.0 {
            s = 1.0;
        }
        s
    };
    let beta0 = match start {
        Some(b) => b.clone(),
        None => least_squares(x, &yv)
            .ok_or_else(|| Error::SingularDesign("normal equations are singular".into()))?,
    };
    let spread = {
        let r = &yv - x * &beta0;
        let mut a: Vec<f64> = r.iter().map(|v| v.abs()).collect();
        a.sort_by(f64::total_cmp);
        let med = a[a.len() / 2];
        if med > 0.0 { med } else { y_scale }
    };
    let beta = smoothed_newton(x, &yv, p, beta0, spread);

    let r0 = &yv - x * &beta;
    let mut basis = initial_basis(x, &r0)
        .ok_or_else(|| Error::SingularDesign("no invertible basis of observations".into()))?;
    let zero_tol = 1e-12 * y_scale;
    let max_pivots = 50 * n + 1000;
    for _ in 0..max_pivots {
        let binv = basis_inverse(x, &basis)
            .ok_or_else(|| Error::Numerical("basis matrix became singular".into()))?;
        let yh = DVector::from_iterator(k, basis.iter().map(|&i| y[i]));
        let beta = &binv * yh;
        let mut r = &yv - x * &beta;
        let mut is_basic = vec![false; n];
        for &i in &basis {
            is_basic[i] = true;
            r[i] = 0.0;
        }

        // Subgradient contribution of nonbasic observations off the fit.
        let mut g = DVector::zeros(k);
        let mut degenerate = Vec::new();
        for i in 0..n {
            if is_basic[i] {
                continue;
            }
            if r[i].abs() <= zero_tol {
                degenerate.push(i);
            } else {
                let psi = if r[i] > 0.0 { p } else { p - 1.0 };
                g += x.row(i).transpose() * psi;
            }
        }

        let mut best: Option<(f64, usize, DVector<f64>)> = None;
        for j in 0..k {
            for s in [1.0, -1.0] {
                let d = binv.column(j) * s;
                let mut slope = -g.dot(&d) + rho(-s, p);
                for &i in &degenerate {
                    slope += rho(-(x.row(i) * &d)[0], p);
                }
                if best.as_ref().is_none_or(|b| slope < b.0) {
                    best = Some((slope, j, d));
                }
            }
        }
        let (slope, leave, d) = best.expect("at least one direction");
        let a = x * &d;
        let scale: f64 = a.iter().map(|v| v.abs()).sum();
        if slope >= -1e-11 * scale.max(1.0) {
            let loss = check_loss(x, y, p, &beta);
            return Ok(QuantileFit { coef: beta, loss, basis });
        }

        let mut breaks: Vec<(f64, usize)> = (0..n)
            .filter(|&i| !is_basic[i] && r[i].abs() > zero_tol && a[i] != 0.0)
            .filter_map(|i| {
                let t = r[i] / a[i];
                (t > 0.0).then_some((t, i))
            })
            .collect();
        breaks.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.1.cmp(&v.1)));
        let mut s = slope;
        let mut enter = None;
        for &(_, i) in &breaks {
            s += a[i].abs();
            if s >= 0.0 {
                enter = Some(i);
                break;
            }
        }
        let enter = enter.ok_or_else(|| Error::Numerical("check loss unbounded along an edge".into()))?;
        basis[leave] = enter;
    }
    Err(Error::NonConvergence {
        what: format!("quantile regression at p={p}"),
        iterations: max_pivots,
    })
}

/// Empirical quantile with linear interpolation between order statistics.
pub(crate) fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Hall–Sheather bandwidth for the sparsity estimate at quantile `p`.
pub fn hall_sheather_bandwidth(n: usize, p: f64) -> f64 {
    let normal = Normal::standard();
    let alpha = 0.05;
    let z_alpha = normal.inverse_cdf(1.0 - alpha / 2.0);
    let zp = normal.inverse_cdf(p);
    let phi = (-0.5 * zp * zp).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (n as f64).powf(-1.0 / 3.0)
        * z_alpha.powf(2.0 / 3.0)
        * (1.5 * phi * phi / (2.0 * zp * zp + 1.0)).powf(1.0 / 3.0)
}

/// Asymptotic covariance under iid errors: p(1-p) s² (XᵀX)⁻¹ where the
/// sparsity s is a difference quotient of residual quantiles.
pub fn iid_covariance(x: &DMatrix<f64>, residuals: &[f64], p: f64) -> Result<DMatrix<f64>> {
    let n = residuals.len();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut h = hall_sheather_bandwidth(n, p);
    let mut sparsity = 0.0;
    for _ in 0..8 {
        let lo = (p - h).max(0.0);
        let hi = (p + h).min(1.0);
        sparsity = (empirical_quantile(&sorted, hi) - empirical_quantile(&sorted, lo)) / (hi - lo);
        if sparsity > 0.0 {
            break;
        }
        h *= 2.0;
    }
    let xtx_inv = linalg::spd_inverse(&(x.transpose() * x))
        .ok_or_else(|| Error::SingularDesign("XᵀX is not invertible".into()))?;
    Ok(xtx_inv * (p * (1.0 - p) * sparsity * sparsity))
}
