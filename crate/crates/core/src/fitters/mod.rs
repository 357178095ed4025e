//! Donor-side estimation of imputation models, plus the survival helpers
//! used for substantive models.

pub mod logit;
pub mod qreg;
pub mod survival;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::formula::{Formula, LevelMap};
use crate::model::{quantile_of_row, FittedImputationModel, Levels, ModelCoefficients, ModelKind, CONS, N_QUANTILES};
use crate::tabular::DataTable;

pub use logit::{logit_fit, mlogit_fit, MultinomialFit, NewtonFit};
pub use qreg::{check_loss, quantile_fit, QuantileFit};
pub use survival::{cox_fit, nelson_aalen_values, CoxFit, SurvivalColumns};

/// Response and design for the rows where the imputed variable is observed.
#[derive(Debug, Clone)]
pub struct ImputationDesign {
    pub colnames: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

/// Builds `[predictors..., _cons]` over the rows where `ivar` is observed.
pub fn imputation_design(data: &DataTable, ivar: &str, predictors: &[String]) -> Result<ImputationDesign> {
    for p in predictors {
        if p == CONS || p == ivar {
            return Err(Error::InvalidInput(format!("`{p}` cannot be a predictor of `{ivar}`")));
        }
    }
    let target = data.column(ivar)?;
    let cols: Vec<&[Option<f64>]> = predictors.iter().map(|p| data.column(p)).collect::<Result<_>>()?;
    let rows: Vec<usize> = (0..data.n_rows()).filter(|&r| target[r].is_some()).collect();
    let k = predictors.len() + 1;
    let mut x = DMatrix::from_element(rows.len(), k, 1.0);
    for (i, &r) in rows.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            x[(i, j)] = col[r].ok_or_else(|| Error::MissingValue {
                row: r + 1,
                column: predictors[j].clone(),
            })?;
        }
    }
    let mut colnames = predictors.to_vec();
    colnames.push(CONS.to_string());
    Ok(ImputationDesign {
        colnames,
        x,
        y: rows.iter().map(|&r| target[r].expect("observed")).collect(),
    })
}

/// Minimum observed rows for 99 quantile fits with `k` predictors.
pub fn qreg_min_rows(k: usize) -> usize {
    30usize.max(5 * (k + 1))
}

/// Fits quantile regressions at p = 0.01, 0.02, …, 0.99.
pub fn fit_qreg99(data: &DataTable, ivar: &str, predictors: &[String]) -> Result<FittedImputationModel> {
    let d = imputation_design(data, ivar, predictors)?;
    let needed = qreg_min_rows(predictors.len());
    if d.y.len() < needed {
        return Err(Error::SampleSize {
            needed,
            found: d.y.len(),
        });
    }
    let p = d.colnames.len();
    let mut coef = DMatrix::zeros(N_QUANTILES, p);
    let mut cov = Vec::with_capacity(N_QUANTILES);
    let mut prev: Option<DVector<f64>> = None;
    for q in 0..N_QUANTILES {
        let tau = quantile_of_row(q);
        let fit = quantile_fit(&d.x, &d.y, tau, prev.as_ref())?;
        let resid: Vec<f64> = d.y.iter().zip((&d.x * &fit.coef).iter()).map(|(a, b)| a - b).collect();
        cov.push(qreg::iid_covariance(&d.x, &resid, tau)?);
        coef.row_mut(q).copy_from(&fit.coef.transpose());
        prev = Some(fit.coef);
    }
    Ok(FittedImputationModel {
        coefficients: ModelCoefficients {
            kind: ModelKind::Qreg,
            colnames: d.colnames,
            coef,
            cov,
            levels: None,
        },
        n_obs: d.y.len(),
        perfect_prediction: false,
    })
}

pub fn fit_logit(data: &DataTable, ivar: &str, predictors: &[String]) -> Result<FittedImputationModel> {
    let d = imputation_design(data, ivar, predictors)?;
    let fit = logit_fit(&d.x, &d.y)?;
    Ok(FittedImputationModel {
        coefficients: ModelCoefficients {
            kind: ModelKind::Logit,
            colnames: d.colnames,
            coef: DMatrix::from_row_slice(1, fit.coef.len(), fit.coef.as_slice()),
            cov: vec![fit.cov],
            levels: None,
        },
        n_obs: d.y.len(),
        perfect_prediction: fit.saturated,
    })
}

pub fn fit_mlogit(data: &DataTable, ivar: &str, predictors: &[String]) -> Result<FittedImputationModel> {
    let d = imputation_design(data, ivar, predictors)?;
    let fit = mlogit_fit(&d.x, &d.y)?;
    Ok(FittedImputationModel {
        coefficients: ModelCoefficients {
            kind: ModelKind::Mlogit,
            colnames: d.colnames,
            coef: fit.coef,
            cov: vec![fit.cov],
            levels: Some(Levels {
                values: fit.levels,
                reference: 0,
            }),
        },
        n_obs: d.y.len(),
        perfect_prediction: fit.saturated,
    })
}

/// Dispatches on `kind`.
pub fn fit_model(kind: ModelKind, data: &DataTable, ivar: &str, predictors: &[String]) -> Result<FittedImputationModel> {
    match kind {
        ModelKind::Qreg => fit_qreg99(data, ivar, predictors),
        ModelKind::Logit => fit_logit(data, ivar, predictors),
        ModelKind::Mlogit => fit_mlogit(data, ivar, predictors),
    }
}

/// Nelson–Aalen cumulative hazard at each subject's time.
pub fn nelson_aalen(data: &DataTable, time: &str, event: &str) -> Result<SurvivalColumns> {
    let t = data.observed_column(time)?;
    let e = data.observed_column(event)?;
    let cumhaz = nelson_aalen_values(&t, &e)?;
    Ok(SurvivalColumns {
        time: t,
        event: e,
        cumhaz,
    })
}

/// Cox regression of (`time`, `event`) on the expanded `terms`.
#[derive(Debug, Clone)]
pub struct CoxEstimate {
    pub names: Vec<String>,
    pub fit: CoxFit,
}

pub fn fit_cox(data: &DataTable, time: &str, event: &str, terms: &Formula) -> Result<CoxEstimate> {
    let levels: LevelMap = terms.levels_in(data)?;
    fit_cox_with_levels(data, time, event, terms, &levels)
}

pub(crate) fn fit_cox_with_levels(
    data: &DataTable,
    time: &str,
    event: &str,
    terms: &Formula,
    levels: &LevelMap,
) -> Result<CoxEstimate> {
    let design = terms.bind(data, levels, &[time, event], false)?;
    let t_col = data.column(time)?;
    let e_col = data.column(event)?;
    let t: Vec<f64> = design.rows.iter().map(|&r| t_col[r].expect("bound row")).collect();
    let e: Vec<f64> = design.rows.iter().map(|&r| e_col[r].expect("bound row")).collect();
    let fit = cox_fit(&design.x, &t, &e, &design.names)?;
    Ok(CoxEstimate {
        names: design.names,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn donor(n: usize, seed: u64) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut c = Vec::new();
        let mut z = Vec::new();
        for _ in 0..n {
            let xi: f64 = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
            let ci: f64 = rng.random_range(0.0..2.0);
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(xi);
            c.push(ci);
            z.push((0.2 * xi + 0.3 * ci + 0.8 * e).exp());
        }
        DataTable::from_observed(vec![("x", x), ("c", c), ("z", z)]).unwrap()
    }

    #[test]
    fn qreg99_layout_and_probe() {
        let t = donor(300, 3);
        let m = fit_qreg99(&t, "z", &names(&["x", "c"])).unwrap();
        let coef = &m.coefficients;
        assert_eq!(coef.coef.shape(), (99, 3));
        assert_eq!(coef.colnames, names(&["x", "c", "_cons"]));
        coef.validate().unwrap();
        let d = imputation_design(&t, "z", &names(&["x", "c"])).unwrap();
        for q in [0, 24, 49, 98] {
            let tau = quantile_of_row(q);
            let b: DVector<f64> = coef.coef.row(q).transpose();
            let base = check_loss(&d.x, &d.y, tau, &b);
            for j in 0..3 {
                for delta in [1e-4, -1e-4] {
                    let mut bb = b.clone();
                    bb[j] += delta;
                    assert!(check_loss(&d.x, &d.y, tau, &bb) >= base - 1e-10);
                }
            }
        }
        for block in &coef.cov {
            assert!(linalg::is_symmetric_psd(block, 1e-8));
        }
    }

    #[test]
    fn qreg99_sample_size() {
        let t = donor(20, 4);
        assert!(matches!(
            fit_qreg99(&t, "z", &names(&["x", "c"])),
            Err(Error::SampleSize { needed: 30, found: 20 })
        ));
    }

    #[test]
    fn missing_predictor_on_observed_row() {
        let t = DataTable::from_columns(vec![
            ("z", vec![Some(1.0), Some(0.0), Some(1.0)]),
            ("x", vec![Some(1.0), None, Some(0.0)]),
        ])
        .unwrap();
        let err = fit_logit(&t, "z", &names(&["x"])).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 2, .. }));
    }

    #[test]
    fn logit_on_non_binary_rejected() {
        let t = donor(100, 5);
        assert!(matches!(fit_logit(&t, "z", &names(&["x"])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mlogit_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 600;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = x
            .iter()
            .map(|xi| {
                let u: f64 = rng.random();
                let p1 = logit::logistic(0.5 + xi);
                if u < 0.3 { 1.0 } else if u < 0.3 + 0.7 * p1 { 3.0 } else { 7.0 }
            })
            .collect();
        let t = DataTable::from_observed(vec![("x", x), ("z", z)]).unwrap();
        let m = fit_mlogit(&t, "z", &names(&["x"])).unwrap();
        let c = &m.coefficients;
        c.validate().unwrap();
        assert_eq!(c.levels.as_ref().unwrap().values, vec![1.0, 3.0, 7.0]);
        assert_eq!(c.cov[0].shape(), (4, 4));
        // Fitted probabilities sum to one on every training row.
        let d = imputation_design(&t, "z", &names(&["x"])).unwrap();
        let mut probs = Vec::new();
        for i in 0..d.x.nrows() {
            let etas: Vec<f64> = (1..3).map(|r| (d.x.row(i) * c.coef.row(r).transpose())[0]).collect();
            logit::multinomial_probs(&etas, 0, &mut probs);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
