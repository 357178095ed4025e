//! Coefficient and covariance layout shared by fitted, exported and pooled
//! imputation models.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tabular::{format_value, is_identifier};

/// Name of the intercept column; always the last predictor.
pub const CONS: &str = "_cons";

/// Number of quantile rows in a quantile imputation model.
pub const N_QUANTILES: usize = 99;

/// The quantile of row `q` (0-based): 0.01, 0.02, …, 0.99.
pub fn quantile_of_row(q: usize) -> f64 {
    (q + 1) as f64 / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Qreg,
    Logit,
    Mlogit,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Qreg => "qreg",
            ModelKind::Logit => "logit",
            ModelKind::Mlogit => "mlogit",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qreg" => Ok(ModelKind::Qreg),
            "logit" => Ok(ModelKind::Logit),
            "mlogit" => Ok(ModelKind::Mlogit),
            other => Err(Error::InvalidInput(format!(
                "unknown imputation model `{other}` (expected qreg, logit or mlogit)"
            ))),
        }
    }
}

/// Category values of a multinomial model, sorted ascending, and the index
/// of the reference level whose coefficient row is all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Levels {
    pub values: Vec<f64>,
    pub reference: usize,
}

/// Coefficients and their covariance.
///
/// `coef` has one row per quantile (qreg), one row (logit) or one row per
/// level including the all-zero reference row (mlogit); columns follow
/// `colnames`. `cov` holds one square block per independently estimated
/// set of coefficients: 99 blocks of size p for qreg, one of size p for
/// logit and one of size (K-1)p for mlogit, ordered by non-reference level
/// and then by column.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCoefficients {
    pub kind: ModelKind,
    pub colnames: Vec<String>,
    pub coef: DMatrix<f64>,
    pub cov: Vec<DMatrix<f64>>,
    pub levels: Option<Levels>,
}

impl ModelCoefficients {
    pub fn n_params(&self) -> usize {
        self.colnames.len()
    }

    /// Predictor names without the trailing `_cons`.
    pub fn predictors(&self) -> &[String] {
        &self.colnames[..self.colnames.len().saturating_sub(1)]
    }

    pub fn n_blocks(&self) -> usize {
        match self.kind {
            ModelKind::Qreg => N_QUANTILES,
            ModelKind::Logit | ModelKind::Mlogit => 1,
        }
    }

    /// Coefficient rows making up covariance block `b`.
    pub fn block_rows(&self, b: usize) -> Vec<usize> {
        match self.kind {
            ModelKind::Qreg => vec![b],
            ModelKind::Logit => vec![0],
            ModelKind::Mlogit => {
                let reference = self.levels.as_ref().map_or(0, |l| l.reference);
                (0..self.coef.nrows()).filter(|&r| r != reference).collect()
            }
        }
    }

    /// The coefficients of block `b` stacked row by row.
    pub fn block_vector(&self, b: usize) -> DVector<f64> {
        let rows = self.block_rows(b);
        let p = self.n_params();
        DVector::from_iterator(
            rows.len() * p,
            rows.iter().flat_map(|&r| (0..p).map(move |c| (r, c))).map(|(r, c)| self.coef[(r, c)]),
        )
    }

    pub fn set_block_vector(coef: &mut DMatrix<f64>, rows: &[usize], v: &DVector<f64>) {
        let p = coef.ncols();
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..p {
                coef[(r, c)] = v[i * p + c];
            }
        }
    }

    pub fn row_labels(&self) -> Vec<String> {
        match self.kind {
            ModelKind::Qreg => (1..=N_QUANTILES).map(|q| format!("q{q:02}")).collect(),
            ModelKind::Logit => vec!["b".to_string()],
            ModelKind::Mlogit => self
                .levels
                .as_ref()
                .map(|l| l.values.iter().map(|v| format_value(*v)).collect())
                .unwrap_or_default(),
        }
    }

    /// Checks every layout invariant.
    pub fn validate(&self) -> Result<()> {
        let p = self.n_params();
        match self.colnames.last() {
            Some(last) if last == CONS => {}
            _ => {
                return Err(Error::Schema(format!(
                    "last column name must be `{CONS}`, got {:?}",
                    self.colnames
                )))
            }
        }
        for (i, n) in self.colnames.iter().enumerate() {
            if !is_identifier(n) {
                return Err(Error::Schema(format!("invalid column name `{n}`")));
            }
            if self.colnames[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate column name `{n}`")));
            }
        }
        if self.coef.ncols() != p {
            return Err(Error::Schema(format!(
                "coefficient matrix has {} columns for {p} names",
                self.coef.ncols()
            )));
        }
        let expected_rows = match self.kind {
            ModelKind::Qreg => N_QUANTILES,
            ModelKind::Logit => 1,
            ModelKind::Mlogit => {
                let levels = self
                    .levels
                    .as_ref()
                    .ok_or_else(|| Error::Schema("mlogit model without level values".into()))?;
                if levels.values.len() < 2 {
                    return Err(Error::Schema("mlogit needs at least two levels".into()));
                }
                if levels.values.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Schema("level values must be strictly increasing".into()));
                }
                let zero_rows: Vec<usize> = (0..self.coef.nrows())
                    .filter(|&r| self.coef.row(r).iter().all(|v| *v == 0.0))
                    .collect();
                if zero_rows != [levels.reference] {
                    return Err(Error::Schema(format!(
                        "expected exactly one all-zero reference row at {}, found {:?}",
                        levels.reference, zero_rows
                    )));
                }
                levels.values.len()
            }
        };
        if self.coef.nrows() != expected_rows {
            return Err(Error::Schema(format!(
                "{} model needs {expected_rows} coefficient rows, found {}",
                self.kind,
                self.coef.nrows()
            )));
        }
        if self.cov.len() != self.n_blocks() {
            return Err(Error::Schema(format!(
                "{} model needs {} covariance blocks, found {}",
                self.kind,
                self.n_blocks(),
                self.cov.len()
            )));
        }
        for (b, block) in self.cov.iter().enumerate() {
            let dim = self.block_rows(b).len() * p;
            if block.nrows() != dim || block.ncols() != dim {
                return Err(Error::Schema(format!(
                    "covariance block {b} is {}x{}, expected {dim}x{dim}",
                    block.nrows(),
                    block.ncols()
                )));
            }
            if !linalg::is_symmetric_psd(block, 1e-8) {
                return Err(Error::Schema(format!(
                    "covariance block {b} is not symmetric positive semi-definite"
                )));
            }
        }
        Ok(())
    }
}

/// An imputation model estimated on donor data.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedImputationModel {
    pub coefficients: ModelCoefficients,
    pub n_obs: usize,
    pub perfect_prediction: bool,
}

/// Coefficients pooled from one or more exported models, ready for imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledImputationModel {
    pub coefficients: ModelCoefficients,
    pub n_sources: usize,
    pub warnings: Vec<String>,
}

impl From<FittedImputationModel> for PooledImputationModel {
    fn from(m: FittedImputationModel) -> Self {
        PooledImputationModel {
            coefficients: m.coefficients,
            n_sources: 1,
            warnings: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlogit() -> ModelCoefficients {
        ModelCoefficients {
            kind: ModelKind::Mlogit,
            colnames: vec!["x".into(), CONS.into()],
            coef: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]),
            cov: vec![DMatrix::identity(4, 4)],
            levels: Some(Levels {
                values: vec![0.0, 1.0, 2.0],
                reference: 0,
            }),
        }
    }

    #[test]
    fn quantile_rows() {
        assert_eq!(quantile_of_row(0), 0.01);
        assert_eq!(quantile_of_row(49), 0.5);
        assert_eq!(quantile_of_row(98), 0.99);
    }

    #[test]
    fn mlogit_block_skips_reference() {
        let m = mlogit();
        m.validate().unwrap();
        assert_eq!(m.block_rows(0), vec![1, 2]);
        assert_eq!(m.block_vector(0).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.row_labels(), vec!["0", "1", "2"]);
    }

    #[test]
    fn mlogit_needs_single_zero_row() {
        let mut m = mlogit();
        m.coef.row_mut(2).fill(0.0);
        assert!(m.validate().is_err());
    }

    #[test]
    fn cons_must_be_last() {
        let mut m = mlogit();
        m.colnames = vec![CONS.into(), "x".into()];
        assert!(m.validate().is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!("mlogit".parse::<ModelKind>().unwrap(), ModelKind::Mlogit);
        assert!("ols".parse::<ModelKind>().is_err());
    }
}
