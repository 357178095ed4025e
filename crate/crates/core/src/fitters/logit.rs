//! Binary and multinomial logistic regression by Newton–Raphson.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub(crate) const GRADIENT_TOL: f64 = 1e-10;
pub(crate) const MAX_ITER: usize = 100;
/// Linear predictors beyond this magnitude count as saturated.
pub const SATURATION_ETA: f64 = 30.0;
const SATURATION_PROB: f64 = 1e-10;

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct NewtonFit {
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Some fitted probability is within 1e-10 of 0 or 1 with |η| > 30.
    pub saturated: bool,
}

fn logit_loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    y.iter().zip(eta.iter()).map(|(&yi, &e)| yi * e - log1p_exp(e)).sum()
}

fn is_saturated(eta: f64, prob: f64) -> bool {
    eta.abs() > SATURATION_ETA && (prob < SATURATION_PROB || prob > 1.0 - SATURATION_PROB)
}

/// Maximizes the Bernoulli log-likelihood of `y ∈ {0,1}` given design `x`.
pub fn logit_fit(x: &DMatrix<f64>, y: &[f64]) -> Result<NewtonFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!("{} responses for {n} design rows", y.len())));
    }
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidInput(format!("outcome must be 0/1, found {v}")));
    }
    let n1 = y.iter().filter(|v| **v == 1.0).count();
    if n1 == 0 || n1 == n {
        return Err(Error::PerfectPrediction(format!(
            "outcome is constant ({}); no maximum likelihood estimate",
            if n1 == 0 { 0 } else { 1 }
        )));
    }
    if linalg::rank(x, 1e-10) < k {
        return Err(Error::SingularDesign(format!("design does not have full column rank {k}")));
    }

    let mut beta = DVector::zeros(k);
    let mut ll = logit_loglik(x, y, &beta);
    let mut growing = 0usize;
    let mut last_norm = 0.0;
    for iter in 0..=MAX_ITER {
        let eta = x * &beta;
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        let mut saturated = false;
        for i in 0..n {
            let pr = logistic(eta[i]);
            saturated |= is_saturated(eta[i], pr);
            let xi = x.row(i).transpose();
            grad += &xi * (y[i] - pr);
            info.ger(pr * (1.0 - pr), &xi, &xi, 1.0);
        }
        let gnorm = grad.amax();
        let converged = gnorm < GRADIENT_TOL;
        let diverging = growing >= 10 && saturated;
        if converged || diverging {
            if diverging && !converged {
                return Err(Error::PerfectPrediction(
                    "coefficients diverge; outcome perfectly predicted by a covariate pattern".into(),
                ));
            }
            let cov = linalg::spd_inverse(&info)
                .ok_or_else(|| Error::SingularDesign("information matrix is singular".into()))?;
            return Ok(NewtonFit {
                coef: beta,
                cov,
                loglik: ll,
                gradient_norm: gnorm,
                iterations: iter,
                saturated,
            });
        }
        if iter == MAX_ITER {
            break;
        }
        let step = linalg::spd_solve(&info, &grad).ok_or_else(|| {
            if saturated {
                Error::PerfectPrediction("information matrix degenerate at saturated fit".into())
            } else {
                Error::SingularDesign("information matrix is singular".into())
            }
        })?;
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut next_ll = logit_loglik(x, y, &next);
        let noise = grad.dot(&step) < 1e-12 * ll.abs().max(1.0);
        if noise {
            next_ll = next_ll.max(ll);
        }
        while next_ll < ll && t > 1e-8 {
            t *= 0.5;
            next = &beta + &step * t;
            next_ll = logit_loglik(x, y, &next);
        }
        if next_ll < ll {
            // Rounding floor: accept the point if the gradient is negligible
            // relative to the sample.
            if gnorm < 1e-7 * n as f64 {
                let cov = linalg::spd_inverse(&info)
                    .ok_or_else(|| Error::SingularDesign("information matrix is singular".into()))?;
                return Ok(NewtonFit {
                    coef: beta,
                    cov,
                    loglik: ll,
                    gradient_norm: gnorm,
                    iterations: iter,
                    saturated,
                });
            }
            break;
        }
        let norm = next.norm();
        growing = if norm > last_norm { growing + 1 } else { 0 };
        last_norm = norm;
        beta = next;
        ll = next_ll;
    }
    Err(Error::NonConvergence {
        what: "logistic regression".into(),
        iterations: MAX_ITER,
    })
}

/// Softmax probabilities for one row given non-reference linear predictors;
/// the reference level has predictor zero.
pub fn multinomial_probs(etas: &[f64], reference: usize, out: &mut Vec<f64>) {
    let k = etas.len() + 1;
    out.clear();
    let mut idx = 0;
    for level in 0..k {
        if level == reference {
            out.push(0.0);
        } else {
            out.push(etas[idx]);
            idx += 1;
        }
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// One row per level; the reference (first) row is zero.
    pub coef: DMatrix<f64>,
    /// Covariance of the non-reference coefficients, level-major.
    pub cov: DMatrix<f64>,
    pub levels: Vec<f64>,
    pub loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub saturated: bool,
}

struct MlogitState {
    loglik: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
    saturated: bool,
}

fn mlogit_state(x: &DMatrix<f64>, cls: &[usize], nlev: usize, theta: &DVector<f64>, with_derivs: bool) -> MlogitState {
    let (n, k) = x.shape();
    let m = nlev - 1;
    let dim = m * k;
    let mut grad = DVector::zeros(if with_derivs { dim } else { 0 });
    let mut info = DMatrix::zeros(if with_derivs { dim } else { 0 }, if with_derivs { dim } else { 0 });
    let mut loglik = 0.0;
    let mut saturated = false;
    let mut etas = vec![0.0; m];
    let mut probs = Vec::with_capacity(nlev);
    for i in 0..n {
        let xi = x.row(i);
        for (a, e) in etas.iter_mut().enumerate() {
            *e = (0..k).map(|c| xi[c] * theta[a * k + c]).sum();
        }
        multinomial_probs(&etas, 0, &mut probs);
        let max = etas.iter().cloned().fold(0.0f64, f64::max);
        let lse = max + (1.0f64 * (-max).exp() + etas.iter().map(|e| (e - max).exp()).sum::<f64>()).ln();
        let own = if cls[i] == 0 { 0.0 } else { etas[cls[i] - 1] };
        loglik += own - lse;
        if etas.iter().any(|e| e.abs() > SATURATION_ETA)
            && probs.iter().any(|&p| p < SATURATION_PROB || p > 1.0 - SATURATION_PROB)
        {
            saturated = true;
        }
        if !with_derivs {
            continue;
        }
        for a in 0..m {
            let pa = probs[a + 1];
            let resid = if cls[i] == a + 1 { 1.0 } else { 0.0 } - pa;
            for c in 0..k {
                grad[a * k + c] += xi[c] * resid;
            }
            for b in 0..m {
                let pb = probs[b + 1];
                let w = if a == b { pa * (1.0 - pa) } else { -pa * pb };
                if w == 0.0 {
                    continue;
                }
                for c in 0..k {
                    for d in 0..k {
                        info[(a * k + c, b * k + d)] += w * xi[c] * xi[d];
                    }
                }
            }
        }
    }
    MlogitState {
        loglik,
        grad,
        info,
        saturated,
    }
}

/// Multinomial logistic regression with the smallest level as reference.
pub fn mlogit_fit(x: &DMatrix<f64>, y: &[f64]) -> Result<MultinomialFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!("{} responses for {n} design rows", y.len())));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite outcome value {v}")));
    }
    let mut levels: Vec<f64> = y.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::InvalidInput("outcome has a single level; need K >= 2".into()));
    }
    if linalg::rank(x, 1e-10) < k {
        return Err(Error::SingularDesign(format!("design does not have full column rank {k}")));
    }
    let nlev = levels.len();
    let cls: Vec<usize> = y
        .iter()
        .map(|v| levels.binary_search_by(|l| l.total_cmp(v)).expect("level present"))
        .collect();
    let dim = (nlev - 1) * k;
    let mut theta = DVector::zeros(dim);
    let mut state = mlogit_state(x, &cls, nlev, &theta, true);
    let mut growing = 0usize;
    let mut last_norm = 0.0;
    for iter in 0..=MAX_ITER {
        let gnorm = state.grad.amax();
        let finish = |theta: DVector<f64>, state: &MlogitState| -> Result<MultinomialFit> {
            let cov = linalg::spd_inverse(&state.info)
                .ok_or_else(|| Error::SingularDesign("information matrix is singular".into()))?;
            let mut coef = DMatrix::zeros(nlev, k);
            for a in 0..nlev - 1 {
                for c in 0..k {
                    coef[(a + 1, c)] = theta[a * k + c];
                }
            }
            Ok(MultinomialFit {
                coef,
                cov,
                levels: levels.clone(),
                loglik: state.loglik,
                gradient_norm: gnorm,
                iterations: iter,
                saturated: state.saturated,
            })
        };
        if gnorm < GRADIENT_TOL {
            if state.saturated {
                return Err(Error::PerfectPrediction("separation in multinomial model".into()));
            }
            return finish(theta, &state);
        }
        if growing >= 10 && state.saturated {
            return Err(Error::PerfectPrediction("separation in multinomial model".into()));
        }
        if iter == MAX_ITER {
            break;
        }
        let step = linalg::spd_solve(&state.info, &state.grad).ok_or_else(|| {
            if state.saturated {
                Error::PerfectPrediction("separation in multinomial model".into())
            } else {
                Error::SingularDesign("information matrix is singular".into())
            }
        })?;
        let mut t = 1.0;
        let mut next = &theta + &step;
        let mut next_ll = mlogit_state(x, &cls, nlev, &next, false).loglik;
        if state.grad.dot(&step) < 1e-12 * state.loglik.abs().max(1.0) {
            next_ll = next_ll.max(state.loglik);
        }
        while next_ll < state.loglik && t > 1e-8 {
            t *= 0.5;
            next = &theta + &step * t;
            next_ll = mlogit_state(x, &cls, nlev, &next, false).loglik;
        }
        if next_ll < state.loglik {
            if gnorm < 1e-7 * n as f64 && !state.saturated {
                return finish(theta, &state);
            }
            break;
        }
        let norm = next.norm();
        growing = if norm > last_norm { growing + 1 } else { 0 };
        last_norm = norm;
        theta = next;
        state = mlogit_state(x, &cls, nlev, &theta, true);
    }
    Err(Error::NonConvergence {
        what: "multinomial logistic regression".into(),
        iterations: MAX_ITER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two(a: usize, b: usize, c: usize, d: usize) -> (DMatrix<f64>, Vec<f64>) {
        // a: x=1,y=1  b: x=1,y=0  c: x=0,y=1  d: x=0,y=0
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (count, xv, yv) in [(a, 1.0, 1.0), (b, 1.0, 0.0), (c, 0.0, 1.0), (d, 0.0, 0.0)] {
            for _ in 0..count {
                rows.push(xv);
                y.push(yv);
            }
        }
        let x = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rows[i] } else { 1.0 });
        (x, y)
    }

    #[test]
    fn two_by_two_log_odds_ratio() {
        let (a, b, c, d) = (12, 7, 5, 16);
        let (x, y) = two_by_two(a, b, c, d);
        let fit = logit_fit(&x, &y).unwrap();
        let expected = ((a * d) as f64 / (b * c) as f64).ln();
        assert!((fit.coef[0] - expected).abs() < 1e-10);
        assert!((fit.coef[1] - (c as f64 / d as f64).ln()).abs() < 1e-10);
        // Woolf variance of the log odds ratio.
        let woolf = 1.0 / a as f64 + 1.0 / b as f64 + 1.0 / c as f64 + 1.0 / d as f64;
        assert!((fit.cov[(0, 0)] - woolf).abs() < 1e-8);
        assert!(fit.gradient_norm < GRADIENT_TOL);
    }

    #[test]
    fn constant_outcome_is_perfect_prediction() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { i as f64 } else { 1.0 });
        assert!(matches!(logit_fit(&x, &[0.0; 6]), Err(Error::PerfectPrediction(_))));
    }

    #[test]
    fn balanced_orthogonal_predictor_has_zero_slope() {
        let (x, y) = two_by_two(10, 10, 10, 10);
        let fit = logit_fit(&x, &y).unwrap();
        assert!(fit.coef[0].abs() < 1e-10);
    }

    #[test]
    fn non_binary_outcome_rejected() {
        let (x, _) = two_by_two(2, 2, 2, 2);
        let y = vec![0.0, 1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!(matches!(logit_fit(&x, &y), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn complete_separation_detected() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { i as f64 } else { 1.0 });
        let y = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert!(matches!(logit_fit(&x, &y), Err(Error::PerfectPrediction(_))));
    }

    #[test]
    fn mlogit_binary_matches_logit() {
        let (x, y) = two_by_two(12, 7, 5, 16);
        let bin = logit_fit(&x, &y).unwrap();
        let multi = mlogit_fit(&x, &y).unwrap();
        assert_eq!(multi.levels, vec![0.0, 1.0]);
        assert!(multi.coef.row(0).iter().all(|v| *v == 0.0));
        for c in 0..2 {
            assert!((multi.coef[(1, c)] - bin.coef[c]).abs() < 1e-8);
            for d in 0..2 {
                assert!((multi.cov[(c, d)] - bin.cov[(c, d)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mlogit_intercept_only_log_count_ratios() {
        let mut y = vec![0.0; 10];
        y.extend(vec![1.0; 20]);
        y.extend(vec![2.0; 30]);
        let x = DMatrix::from_element(60, 1, 1.0);
        let fit = mlogit_fit(&x, &y).unwrap();
        assert!((fit.coef[(1, 0)] - 2f64.ln()).abs() < 1e-10);
        assert!((fit.coef[(2, 0)] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn mlogit_equal_counts_zero_intercepts() {
        let y: Vec<f64> = (0..30).map(|i| (i % 3) as f64).collect();
        let x = DMatrix::from_element(30, 1, 1.0);
        let fit = mlogit_fit(&x, &y).unwrap();
        assert!(fit.coef[(1, 0)].abs() < 1e-10);
        assert!(fit.coef[(2, 0)].abs() < 1e-10);
    }

    #[test]
    fn mlogit_single_level_rejected() {
        let x = DMatrix::from_element(5, 1, 1.0);
        assert!(mlogit_fit(&x, &[2.0; 5]).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut out = Vec::new();
        multinomial_probs(&[3.0, -700.0, 12.5], 1, &mut out);
        assert_eq!(out.len(), 4);
        assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
