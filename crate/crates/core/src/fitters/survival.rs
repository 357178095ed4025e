//! Nelson–Aalen cumulative hazard and Cox proportional hazards with
//! Breslow handling of tied event times.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

const COX_GRADIENT_TOL: f64 = 1e-8;
const COX_MAX_ITER: usize = 100;

/// Per-subject survival data with the Nelson–Aalen estimate at each
/// subject's own time.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalColumns {
    pub time: Vec<f64>,
    pub event: Vec<f64>,
    pub cumhaz: Vec<f64>,
}

pub(crate) fn validate_survival(time: &[f64], event: &[f64]) -> Result<()> {
    if time.len() != event.len() {
        return Err(Error::InvalidInput("time and event lengths differ".into()));
    }
    if let Some((i, t)) = time.iter().enumerate().find(|(_, t)| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput(format!("time must be positive, row {} has {t}", i + 1)));
    }
    if let Some((i, e)) = event.iter().enumerate().find(|(_, e)| **e != 0.0 && **e != 1.0) {
        return Err(Error::InvalidInput(format!("event must be 0/1, row {} has {e}", i + 1)));
    }
    Ok(())
}

/// Ĥ(t) = Σ_{event times s ≤ t} d_s / n_s, evaluated at every subject's time.
pub fn nelson_aalen_values(time: &[f64], event: &[f64]) -> Result<Vec<f64>> {
    validate_survival(time, event)?;
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut cumhaz = vec![0.0; n];
    let mut h = 0.0;
    let mut start = 0;
    while start < n {
        let t = time[order[start]];
        let mut end = start;
        let mut deaths = 0.0;
        while end < n && time[order[end]] == t {
            deaths += event[order[end]];
            end += 1;
        }
        let at_risk = (n - start) as f64;
        h += deaths / at_risk;
        for &i in &order[start..end] {
            cumhaz[i] = h;
        }
        start = end;
    }
    Ok(cumhaz)
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

struct Partial {
    loglik: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

/// Breslow log partial likelihood with its gradient and information.
/// `order` sorts subjects by descending time.
fn partial_likelihood(x: &DMatrix<f64>, time: &[f64], event: &[f64], order: &[usize], beta: &DVector<f64>) -> Partial {
    let k = x.ncols();
    let eta = x * beta;
    let shift = eta.max();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(k);
    let mut s2 = DMatrix::zeros(k, k);
    let mut loglik = 0.0;
    let mut grad = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    let n = order.len();
    let mut start = 0;
    while start < n {
        let t = time[order[start]];
        let mut end = start;
        let mut deaths = 0.0;
        let mut xsum = DVector::zeros(k);
        let mut eta_sum = 0.0;
        while end < n && time[order[end]] == t {
            let i = order[end];
            let xi = x.row(i).transpose();
            let w = (eta[i] - shift).exp();
            s0 += w;
            s1 += &xi * w;
            s2.ger(w, &xi, &xi, 1.0);
            if event[i] == 1.0 {
                deaths += 1.0;
                xsum += &xi;
                eta_sum += eta[i];
            }
            end += 1;
        }
        if deaths > 0.0 {
            let mean = &s1 / s0;
            loglik += eta_sum - deaths * (s0.ln() + shift);
            grad += xsum - &mean * deaths;
            info += (&s2 / s0 - &mean * mean.transpose()) * deaths;
        }
        start = end;
    }
    Partial { loglik, grad, info }
}

/// Breslow log partial likelihood at `beta`.
pub fn cox_loglik(x: &DMatrix<f64>, time: &[f64], event: &[f64], beta: &DVector<f64>) -> f64 {
    let order = descending(time);
    partial_likelihood(x, time, event, &order, beta).loglik
}

fn descending(time: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]).then(a.cmp(&b)));
    order
}

/// Maximizes the Breslow partial likelihood. `names` label the design
/// columns in error messages.
pub fn cox_fit(x: &DMatrix<f64>, time: &[f64], event: &[f64], names: &[String]) -> Result<CoxFit> {
    validate_survival(time, event)?;
    let (n, k) = x.shape();
    if time.len() != n {
        return Err(Error::InvalidInput(format!("{} times for {n} design rows", time.len())));
    }
    if event.iter().all(|e| *e == 0.0) {
        return Err(Error::MonotoneLikelihood("no events".into()));
    }
    for c in 0..k {
        let col = x.column(c);
        if col.iter().all(|v| *v == col[0]) {
            let name = names.get(c).map_or_else(|| format!("column {c}"), Clone::clone);
            return Err(Error::SingularDesign(format!("covariate `{name}` is constant; no information")));
        }
    }
    let order = descending(time);
    let mut beta = DVector::zeros(k);
    let mut state = partial_likelihood(x, time, event, &order, &beta);
    let info_at_zero = state.info.diagonal();
    for iter in 0..=COX_MAX_ITER {
        let gnorm = state.grad.amax();
        if gnorm < COX_GRADIENT_TOL {
            // A coefficient running off to infinity also flattens the
            // gradient; its information collapses relative to the start.
            if let Some(j) = (0..k).find(|&j| state.info[(j, j)] < 1e-6 * info_at_zero[j]) {
                let name = names.get(j).map_or_else(|| format!("column {j}"), Clone::clone);
                return Err(Error::MonotoneLikelihood(format!(
                    "coefficient of `{name}` diverges (no events in a covariate group?)"
                )));
            }
            let cov = linalg::spd_inverse(&state.info)
                .ok_or_else(|| Error::SingularDesign("partial likelihood information is singular".into()))?;
            return Ok(CoxFit {
                coef: beta,
                cov,
                loglik: state.loglik,
                gradient_norm: gnorm,
                iterations: iter,
            });
        }
        if iter == COX_MAX_ITER {
            break;
        }
        let step = linalg::spd_solve(&state.info, &state.grad).ok_or_else(|| {
            Error::MonotoneLikelihood("information matrix degenerate; a coefficient diverges".into())
        })?;
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut cand = partial_likelihood(x, time, event, &order, &next);
        if state.grad.dot(&step) < 1e-12 * state.loglik.abs().max(1.0) {
            cand.loglik = cand.loglik.max(state.loglik);
        }
        while cand.loglik < state.loglik && t > 1e-8 {
            t *= 0.5;
            next = &beta + &step * t;
            cand = partial_likelihood(x, time, event, &order, &next);
        }
        if cand.loglik < state.loglik {
            if gnorm < 1e-6 * n as f64 {
                let cov = linalg::spd_inverse(&state.info)
                    .ok_or_else(|| Error::SingularDesign("partial likelihood information is singular".into()))?;
                return Ok(CoxFit {
                    coef: beta,
                    cov,
                    loglik: state.loglik,
                    gradient_norm: gnorm,
                    iterations: iter,
                });
            }
            break;
        }
        if next.amax() > 50.0 {
            return Err(Error::MonotoneLikelihood(
                "coefficient diverges (no events in a covariate group?)".into(),
            ));
        }
        beta = next;
        state = cand;
    }
    Err(Error::NonConvergence {
        what: "Cox regression".into(),
        iterations: COX_MAX_ITER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_events_hand_computed() {
        let h = nelson_aalen_values(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((h[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((h[1] - (1.0 / 3.0 + 0.5)).abs() < 1e-15);
        assert!((h[2] - (1.0 / 3.0 + 0.5 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn all_censored_is_zero() {
        let h = nelson_aalen_values(&[3.0, 1.0, 2.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_subject() {
        assert_eq!(nelson_aalen_values(&[4.2], &[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn ties_share_value_and_nonpositive_time_rejected() {
        let h = nelson_aalen_values(&[2.0, 1.0, 2.0, 5.0], &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(h[0], h[2]);
        assert!((h[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h[3] - (2.0 / 3.0 + 1.0)).abs() < 1e-15);
        assert!(nelson_aalen_values(&[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    /// Direct sum over risk sets, written independently of the sorted sweep.
    fn naive_loglik(x: &[f64], time: &[f64], event: &[f64], beta: f64) -> f64 {
        let mut ll = 0.0;
        for i in 0..x.len() {
            if event[i] == 1.0 {
                let denom: f64 = (0..x.len()).filter(|&j| time[j] >= time[i]).map(|j| (beta * x[j]).exp()).sum();
                ll += beta * x[i] - denom.ln();
            }
        }
        ll
    }

    #[test]
    fn two_groups_match_grid_search() {
        let group = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let time = [2.0, 4.0, 5.0, 7.0, 9.0, 1.0, 3.0, 4.0, 6.0, 8.0];
        let event = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut step = 0.01;
        let mut lo = -5.0;
        let mut hi = 5.0;
        for _ in 0..4 {
            let mut b = lo;
            while b <= hi {
                let ll = naive_loglik(&group, &time, &event, b);
                if ll > best.0 {
                    best = (ll, b);
                }
                b += step;
            }
            lo = best.1 - 2.0 * step;
            hi = best.1 + 2.0 * step;
            step /= 100.0;
        }
        let x = DMatrix::from_column_slice(10, 1, &group);
        let fit = cox_fit(&x, &time, &event, &["g".into()]).unwrap();
        assert!((fit.coef[0] - best.1).abs() < 1e-4, "{} vs {}", fit.coef[0], best.1);
        assert!((fit.loglik - naive_loglik(&group, &time, &event, fit.coef[0])).abs() < 1e-10);
    }

    #[test]
    fn constant_covariate_rejected() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let err = cox_fit(&x, &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 0.0, 1.0], &["c".into()]).unwrap_err();
        assert!(matches!(err, Error::SingularDesign(_)));
    }

    #[test]
    fn group_without_events_is_monotone() {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let err = cox_fit(&x, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], &["g".into()]).unwrap_err();
        assert!(matches!(err, Error::MonotoneLikelihood(_)), "{err:?}");
    }
}
