//! Filling in one variable `M` times from a pooled external model.
//!
//! Each imputation `m` gets its own random stream derived from
//! `(seed, m)`. On that stream the model coefficients are perturbed once,
//! block by block, and then one uniform is drawn per row to impute, in row
//! order. Replicates are therefore reproducible regardless of how many run
//! concurrently.

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fitters::logit::{logistic, multinomial_probs, SATURATION_ETA};
use crate::linalg;
use crate::model::{ModelCoefficients, ModelKind, PooledImputationModel, N_QUANTILES};
use crate::tabular::DataTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbMode {
    /// Draw each block from its full covariance.
    #[default]
    Full,
    /// Ignore covariances and perturb coefficients independently.
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct ImputationSpec {
    pub ivar: String,
    pub model: PooledImputationModel,
    pub m_add: usize,
    pub seed: u64,
    pub touse: Option<String>,
    pub replace: bool,
    pub perturb: PerturbMode,
    /// Impute 1 when `U > θ` instead of `U < θ`.
    pub literal_eq7: bool,
}

impl ImputationSpec {
    pub fn new(ivar: impl Into<String>, model: PooledImputationModel, m_add: usize, seed: u64) -> Self {
        ImputationSpec {
            ivar: ivar.into(),
            model,
            m_add,
            seed,
            touse: None,
            replace: false,
            perturb: PerturbMode::Full,
            literal_eq7: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationReport {
    pub ivar: String,
    pub kind: ModelKind,
    pub seed: u64,
    pub m: usize,
    pub m_add: usize,
    pub m_update: usize,
    pub k_ivars: usize,
    pub pp: bool,
    pub n_g: usize,
    pub n: usize,
    pub n_complete: usize,
    pub n_incomplete: usize,
    pub n_imputed: usize,
}

#[derive(Debug, Clone)]
pub struct ImputationRun {
    pub completed: DataTable,
    pub report: ImputationReport,
    pub warnings: Vec<String>,
}

/// Name of the column holding imputation `m` of `ivar`.
pub fn replicate_column(ivar: &str, m: usize) -> String {
    format!("{ivar}__m{m}")
}

/// If `name` is an imputation column, its variable and replicate index.
pub fn parse_replicate_column(name: &str) -> Option<(&str, usize)> {
    let (var, idx) = name.rsplit_once("__m")?;
    if var.is_empty() || idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((var, idx.parse().ok()?))
}

/// The random stream for imputation `m`.
pub fn replicate_rng(seed: u64, m: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng
}

/// Draws perturbed coefficient matrices around a pooled model.
#[derive(Debug, Clone)]
pub struct Perturber {
    mean: ModelCoefficients,
    factors: Vec<DMatrix<f64>>,
}

impl Perturber {
    pub fn new(model: &ModelCoefficients, mode: PerturbMode) -> Result<Self> {
        let factors = model
            .cov
            .iter()
            .enumerate()
            .map(|(b, cov)| {
                let cov = match mode {
                    PerturbMode::Full => cov.clone(),
                    PerturbMode::Diagonal => DMatrix::from_diagonal(&cov.diagonal()),
                };
                if let Some(l) = linalg::psd_factor(&cov, 1e-8) {
                    return Ok(l);
                }
                let ridge = 1e-10 * cov.trace().abs() / cov.nrows() as f64;
                let ridged = &cov + DMatrix::identity(cov.nrows(), cov.ncols()) * ridge;
                linalg::psd_factor(&ridged, 1e-8)
                    .ok_or_else(|| Error::Numerical(format!("covariance block {b} cannot be factorized")))
            })
            .collect::<Result<_>>()?;
        Ok(Perturber {
            mean: model.clone(),
            factors,
        })
    }

    /// One draw `γ* ~ N(γ̄, Φ̄)`, block by block. Rows outside every block
    /// (the multinomial reference) keep their pooled values.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let mut coef = self.mean.coef.clone();
        for (b, l) in self.factors.iter().enumerate() {
            let z = DVector::from_iterator(l.ncols(), (0..l.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let draw = self.mean.block_vector(b) + l * z;
            ModelCoefficients::set_block_vector(&mut coef, &self.mean.block_rows(b), &draw);
        }
        coef
    }
}

/// Sorts predicted quantiles so the quantile function is nondecreasing.
pub fn rearrange(quantiles: &mut [f64]) {
    quantiles.sort_by(f64::total_cmp);
}

/// Interpolated draw from 99 rearranged quantile predictions.
///
/// `quantiles[i]` is the prediction at p = (i+1)/100. `u` is mapped to a
/// percentage clamped to [1, 99], then the two neighbouring quantiles are
/// mixed by its fractional part.
pub fn quantile_draw(quantiles: &[f64], u: f64) -> f64 {
    debug_assert_eq!(quantiles.len(), N_QUANTILES);
    let pct = (100.0 * u).clamp(1.0, 99.0);
    let f = pct.floor();
    let frac = pct - f;
    let lo = f as usize - 1;
    if lo + 1 >= N_QUANTILES {
        return quantiles[N_QUANTILES - 1];
    }
    (1.0 - frac) * quantiles[lo] + frac * quantiles[lo + 1]
}

/// Smallest category whose cumulative probability reaches `u`.
pub fn categorical_draw(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if u <= cum {
            return k;
        }
    }
    probs.len() - 1
}

struct Replicate {
    values: Vec<f64>,
    saturated: bool,
}

/// Predictor values (with the trailing constant) for every row to impute.
fn predictor_rows(data: &DataTable, model: &ModelCoefficients, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<&[Option<f64>]> = model.predictors().iter().map(|p| data.column(p)).collect::<Result<_>>()?;
    rows.iter()
        .map(|&r| {
            let mut c = Vec::with_capacity(cols.len() + 1);
            for (j, col) in cols.iter().enumerate() {
                c.push(col[r].ok_or_else(|| Error::MissingValue {
                    row: r + 1,
                    column: model.predictors()[j].clone(),
                })?);
            }
            c.push(1.0);
            Ok(c)
        })
        .collect()
}

fn linear_predictor(coef: &DMatrix<f64>, row: usize, c: &[f64]) -> f64 {
    c.iter().enumerate().map(|(j, v)| coef[(row, j)] * v).sum()
}

fn impute_replicate(
    spec: &ImputationSpec,
    perturber: &Perturber,
    design: &[Vec<f64>],
    m: usize,
) -> Replicate {
    let model = &spec.model.coefficients;
    let mut rng = replicate_rng(spec.seed, m);
    let coef = perturber.draw(&mut rng);
    let mut saturated = false;
    let mut values = Vec::with_capacity(design.len());
    match model.kind {
        ModelKind::Qreg => {
            let mut q = vec![0.0; N_QUANTILES];
            for c in design {
                for (i, qi) in q.iter_mut().enumerate() {
                    *qi = linear_predictor(&coef, i, c);
                }
                rearrange(&mut q);
                values.push(quantile_draw(&q, rng.random()));
            }
        }
        ModelKind::Logit => {
            for c in design {
                let eta = linear_predictor(&coef, 0, c);
                saturated |= eta.abs() > SATURATION_ETA;
                let theta = logistic(eta);
                let u: f64 = rng.random();
                let one = if spec.literal_eq7 { u > theta } else { u < theta };
                values.push(if one { 1.0 } else { 0.0 });
            }
        }
        ModelKind::Mlogit => {
            let levels = model.levels.as_ref().expect("validated mlogit model");
            let free: Vec<usize> = (0..coef.nrows()).filter(|&r| r != levels.reference).collect();
            let mut etas = vec![0.0; free.len()];
            let mut probs = Vec::new();
            for c in design {
                for (e, &r) in etas.iter_mut().zip(&free) {
                    *e = linear_predictor(&coef, r, c);
                    saturated |= e.abs() > SATURATION_ETA;
                }
                multinomial_probs(&etas, levels.reference, &mut probs);
                values.push(levels.values[categorical_draw(&probs, rng.random())]);
            }
        }
    }
    Replicate { values, saturated }
}

/// Imputes `spec.ivar` in `data`, appending `<ivar>__m1..M`.
pub fn run(data: &DataTable, spec: &ImputationSpec) -> Result<ImputationRun> {
    let model = &spec.model.coefficients;
    model.validate()?;
    if spec.m_add == 0 {
        return Err(Error::InvalidInput("the number of imputations must be at least 1".into()));
    }
    if model.predictors().iter().any(|p| p == &spec.ivar) {
        return Err(Error::InvalidInput(format!("`{}` cannot predict itself", spec.ivar)));
    }
    let target = data.column(&spec.ivar)?;
    let scope: Vec<bool> = match &spec.touse {
        None => vec![true; data.n_rows()],
        Some(name) => data
            .column(name)?
            .iter()
            .enumerate()
            .map(|(r, v)| match v {
                Some(x) if *x == 1.0 => Ok(true),
                Some(x) if *x == 0.0 => Ok(false),
                _ => Err(Error::InvalidInput(format!("`{name}` must be 0 or 1 (row {})", r + 1))),
            })
            .collect::<Result<_>>()?,
    };

    let mut completed = data.clone();
    let existing: Vec<String> = completed
        .names()
        .filter(|n| parse_replicate_column(n).is_some_and(|(v, _)| v == spec.ivar))
        .map(str::to_string)
        .collect();
    if !existing.is_empty() {
        if !spec.replace {
            return Err(Error::InvalidInput(format!(
                "imputations of `{}` already exist ({}); use replace",
                spec.ivar,
                existing.join(", ")
            )));
        }
        completed.retain_columns(|n| !existing.iter().any(|e| e == n));
    }

    let rows: Vec<usize> = (0..data.n_rows()).filter(|&r| scope[r] && target[r].is_none()).collect();
    let n = scope.iter().filter(|s| **s).count();
    let n_incomplete = rows.len();
    let design = predictor_rows(data, model, &rows)?;
    let perturber = Perturber::new(model, spec.perturb)?;

    let mut warnings = Vec::new();
    if rows.is_empty() {
        warnings.push(format!("no missing values of `{}` to impute; imputations equal the observed column", spec.ivar));
    }
    let replicates: Vec<Replicate> = (1..=spec.m_add)
        .into_par_iter()
        .map(|m| impute_replicate(spec, &perturber, &design, m))
        .collect();

    let mut pp = false;
    for (i, rep) in replicates.iter().enumerate() {
        pp |= rep.saturated;
        let mut col = target.to_vec();
        for (&r, v) in rows.iter().zip(&rep.values) {
            col[r] = Some(*v);
        }
        completed.push_column(replicate_column(&spec.ivar, i + 1), col)?;
    }
    if pp {
        warnings.push("perturbed linear predictor exceeded saturation (|eta| > 30) for some rows".into());
    }

    Ok(ImputationRun {
        completed,
        report: ImputationReport {
            ivar: spec.ivar.clone(),
            kind: model.kind,
            seed: spec.seed,
            m: spec.m_add,
            m_add: spec.m_add,
            m_update: 0,
            k_ivars: 1,
            pp,
            n_g: 1,
            n,
            n_complete: n - n_incomplete,
            n_incomplete,
            n_imputed: n_incomplete,
        },
        warnings,
    })
}

impl ImputationReport {
    /// `key=value` lines for machines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ivar={}", self.ivar);
        let _ = writeln!(s, "method={}", self.kind);
        let _ = writeln!(s, "seed={}", self.seed);
        for (k, v) in [
            ("M", self.m),
            ("M_add", self.m_add),
            ("M_update", self.m_update),
            ("k_ivars", self.k_ivars),
            ("pp", usize::from(self.pp)),
            ("N_g", self.n_g),
            ("N", self.n),
            ("N_complete", self.n_complete),
            ("N_incomplete", self.n_incomplete),
            ("N_imputed", self.n_imputed),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

impl fmt::Display for ImputationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = "-".repeat(66);
        writeln!(f, "{:<44}Imputations = {:>8}", format!("External imputation using {}", self.kind), self.m)?;
        writeln!(f, "{:<50}added = {:>8}", "User method from", self.m_add)?;
        writeln!(f, "{:<48}updated = {:>8}", format!("Imputed: m=1 through m={}", self.m), self.m_update)?;
        writeln!(f)?;
        writeln!(f, "{rule}")?;
        writeln!(f, "                   |               Observations per m             ")?;
        writeln!(f, "                   |----------------------------------------------")?;
        writeln!(f, "          Variable |   Complete   Incomplete   Imputed |     Total")?;
        writeln!(f, "-------------------+-----------------------------------+----------")?;
        writeln!(
            f,
            "{:>18} | {:>10} {:>12} {:>9} | {:>9}",
            self.ivar, self.n_complete, self.n_incomplete, self.n_imputed, self.n
        )?;
        writeln!(f, "{rule}")?;
        writeln!(f, "(Complete + Incomplete = Total; Imputed is the minimum across m")?;
        writeln!(f, " of the number of filled-in observations.)")
    }
}
