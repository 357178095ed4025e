//! Substantive analysis of completed data sets and Rubin's rules.
//!
//! A completed table holds the original columns plus `<ivar>__m1..M`. For
//! replicate `m` the imputed column is substituted for `ivar` and the
//! formula is re-bound, so indicator and product terms are recomputed from
//! the imputed values rather than imputed themselves.

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::fitters::{self, logit_fit};
use crate::formula::{Formula, LevelMap};
use crate::impute::parse_replicate_column;
use crate::tabular::{format_value, DataTable};

/// Above this many degrees of freedom the normal limit is used.
const NORMAL_DF: f64 = 1e7;

/// Rubin's rules for one scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarPool {
    pub qbar: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
    /// `f64::INFINITY` when the between-imputation variance is zero.
    pub df: f64,
}

/// Pools estimates `q` with within-imputation variances `w`.
pub fn rubin_scalar(q: &[f64], w: &[f64]) -> ScalarPool {
    let m = q.len() as f64;
    let qbar = q.iter().sum::<f64>() / m;
    let within = w.iter().sum::<f64>() / m;
    let between = if q.len() > 1 {
        q.iter().map(|v| (v - qbar).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let inflated = (1.0 + 1.0 / m) * between;
    let total = within + inflated;
    let df = if inflated > 0.0 {
        (m - 1.0) * (1.0 + within / inflated).powi(2)
    } else {
        f64::INFINITY
    };
    ScalarPool {
        qbar,
        within,
        between,
        total,
        df,
    }
}

/// Two-sided 95% critical value for `df` degrees of freedom.
pub fn critical_value(df: f64) -> f64 {
    if df.is_finite() && df < NORMAL_DF {
        StudentsT::new(0.0, 1.0, df).expect("positive df").inverse_cdf(0.975)
    } else {
        Normal::standard().inverse_cdf(0.975)
    }
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    let tail = if df.is_finite() && df < NORMAL_DF {
        StudentsT::new(0.0, 1.0, df).expect("positive df").sf(t.abs())
    } else {
        Normal::standard().sf(t.abs())
    };
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledParameter {
    pub name: String,
    pub pool: ScalarPool,
    pub se: f64,
    pub t: f64,
    pub p: f64,
    pub ci: (f64, f64),
}

impl PooledParameter {
    fn new(name: String, pool: ScalarPool) -> Self {
        let se = pool.total.sqrt();
        let crit = critical_value(pool.df);
        PooledParameter {
            name,
            se,
            t: pool.qbar / se,
            p: two_sided_p(pool.qbar / se, pool.df),
            ci: (pool.qbar - crit * se, pool.qbar + crit * se),
            pool,
        }
    }

    /// Point estimate, SE and CI on the reported scale.
    pub fn reported(&self, exponentiate: bool) -> (f64, f64, (f64, f64)) {
        if exponentiate {
            let e = self.pool.qbar.exp();
            (e, e * self.se, (self.ci.0.exp(), self.ci.1.exp()))
        } else {
            (self.pool.qbar, self.se, self.ci)
        }
    }
}

/// Rubin-combined estimates of a substantive model.
#[derive(Debug, Clone)]
pub struct PooledAnalysis {
    pub response: String,
    pub m: usize,
    pub params: Vec<PooledParameter>,
    pub estimates: Vec<DVector<f64>>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub total: DMatrix<f64>,
    pub exponentiated: bool,
}

/// Combines per-replicate estimates and covariances.
pub fn combine(names: &[String], estimates: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Result<PooledAnalysis> {
    let m = estimates.len();
    if m == 0 || covs.len() != m {
        return Err(Error::InvalidInput("need one covariance per estimate and at least one replicate".into()));
    }
    let k = names.len();
    if estimates.iter().any(|e| e.len() != k) || covs.iter().any(|c| c.shape() != (k, k)) {
        return Err(Error::InvalidInput("estimate dimensions differ across replicates".into()));
    }
    let mf = m as f64;
    let qbar = estimates.iter().fold(DVector::zeros(k), |a, e| a + e) / mf;
    let within = covs.iter().fold(DMatrix::zeros(k, k), |a, c| a + c) / mf;
    let between = if m > 1 {
        estimates
            .iter()
            .map(|e| {
                let d = e - &qbar;
                &d * d.transpose()
            })
            .fold(DMatrix::zeros(k, k), |a, c| a + c)
            / (mf - 1.0)
    } else {
        DMatrix::zeros(k, k)
    };
    let total = &within + &between * (1.0 + 1.0 / mf);
    let params = (0..k)
        .map(|j| {
            let q: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let w: Vec<f64> = covs.iter().map(|c| c[(j, j)]).collect();
            PooledParameter::new(names[j].clone(), rubin_scalar(&q, &w))
        })
        .collect();
    Ok(PooledAnalysis {
        response: String::new(),
        m,
        params,
        estimates: estimates.to_vec(),
        within,
        between,
        total,
        exponentiated: false,
    })
}

impl PooledAnalysis {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&PooledParameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Pools the sum of the named coefficients, e.g. a main effect plus an
    /// interaction to get a level-specific effect.
    pub fn contrast(&self, terms: &[&str]) -> Result<PooledParameter> {
        let k = self.params.len();
        let mut c = DVector::zeros(k);
        for t in terms {
            let j = self
                .params
                .iter()
                .position(|p| p.name == *t)
                .ok_or_else(|| Error::UnknownColumn(t.to_string()))?;
            c[j] += 1.0;
        }
        let q: Vec<f64> = self.estimates.iter().map(|e| e.dot(&c)).collect();
        let w = (c.transpose() * &self.within * &c)[0];
        let pool = rubin_scalar(&q, &vec![w; q.len()]);
        Ok(PooledParameter::new(terms.join("+"), pool))
    }

    pub const TSV_HEADER: &'static str = "term\testimate\tstd_err\tt\tp\tci_low\tci_high\tdf\tqbar\twithin\tbetween\ttotal\n";

    /// One TSV line for `p` on the reported scale, followed by the raw pool.
    pub fn tsv_row(&self, p: &PooledParameter) -> String {
        let (est, se, (lo, hi)) = p.reported(self.exponentiated);
        let cells = [est, se, p.t, p.p, lo, hi, p.pool.df, p.pool.qbar, p.pool.within, p.pool.between, p.pool.total];
        let mut s = p.name.clone();
        for v in cells {
            let _ = write!(s, "\t{}", format_value(v));
        }
        s.push('\n');
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::TSV_HEADER);
        for p in &self.params {
            s.push_str(&self.tsv_row(p));
        }
        s
    }

    /// One formatted row in the layout of [`fmt::Display`].
    pub fn format_row(&self, p: &PooledParameter) -> String {
        let (est, se, (lo, hi)) = p.reported(self.exponentiated);
        format!(
            "{:>12} | {:>10} {:>10} {:>8} {:>7} {:>12} {:>11}",
            truncate_name(&p.name),
            g9(est),
            g9(se),
            format!("{:.2}", p.t),
            format!("{:.3}", p.p),
            g9(lo),
            g9(hi)
        )
    }
}

fn truncate_name(name: &str) -> String {
    if name.chars().count() <= 12 {
        name.to_string()
    } else {
        let tail: String = name.chars().rev().take(11).collect::<Vec<_>>().into_iter().rev().collect();
        format!("~{tail}")
    }
}

/// Roughly Stata's `%9.0g`: seven significant digits, no leading zero.
fn g9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v != 0.0 && (v.abs() >= 1e7 || v.abs() < 1e-4) {
        return format!("{v:.3e}");
    }
    let digits = if v.abs() >= 1.0 { v.abs().log10().floor() as i32 + 1 } else { 0 };
    let decimals = (7 - digits).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if let Some(rest) = s.strip_prefix("0.") {
        s = format!(".{rest}");
    } else if let Some(rest) = s.strip_prefix("-0.") {
        s = format!("-.{rest}");
    }
    s
}

impl fmt::Display for PooledAnalysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = "-".repeat(78);
        let head = if self.exponentiated { "exp(b)" } else { "Coefficient" };
        writeln!(f, "{rule}")?;
        writeln!(
            f,
            "{:>12} | {:>10}   Std. err.      t    P>|t|     [95% conf. interval]",
            truncate_name(&self.response),
            head
        )?;
        writeln!(f, "-------------+----------------------------------------------------------------")?;
        for p in &self.params {
            writeln!(f, "{}", self.format_row(p))?;
        }
        writeln!(f, "{rule}")?;
        let dfs: Vec<f64> = self.params.iter().map(|p| p.pool.df).collect();
        let min_df = dfs.iter().cloned().fold(f64::INFINITY, f64::min);
        write!(f, "Imputations = {}; ", self.m)?;
        if min_df.is_finite() {
            writeln!(f, "smallest df = {min_df:.1}")
        } else {
            writeln!(f, "df = infinity (no between-imputation variance)")
        }
    }
}

/// The substantive model fitted to each completed data set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Family {
    Logit { outcome: String },
    Cox { time: String, event: String },
}

/// The imputed variable and number of imputations in a completed table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedLayout {
    pub ivar: String,
    pub m: usize,
}

pub fn completed_layout(table: &DataTable) -> Result<CompletedLayout> {
    let mut ivar: Option<String> = None;
    let mut idx = Vec::new();
    for name in table.names() {
        if let Some((v, m)) = parse_replicate_column(name) {
            match &ivar {
                None => ivar = Some(v.to_string()),
                Some(prev) if prev != v => {
                    return Err(Error::Schema(format!("imputations of both `{prev}` and `{v}` found")))
                }
                _ => {}
            }
            idx.push(m);
        }
    }
    let ivar = ivar.ok_or_else(|| Error::Schema("no imputation columns `<var>__m<k>` found".into()))?;
    idx.sort_unstable();
    if idx.iter().enumerate().any(|(i, &m)| m != i + 1) {
        return Err(Error::Schema(format!("imputations of `{ivar}` are not numbered 1..M")));
    }
    table.column(&ivar)?;
    Ok(CompletedLayout { ivar, m: idx.len() })
}

/// Completed data set `m`: `ivar` replaced by its `m`-th imputation.
pub fn materialize(table: &DataTable, layout: &CompletedLayout, m: usize) -> Result<DataTable> {
    let values = table.column(&crate::impute::replicate_column(&layout.ivar, m))?.to_vec();
    let mut out = table.clone();
    out.retain_columns(|n| parse_replicate_column(n).is_none());
    out.set_column(&layout.ivar, values)?;
    Ok(out)
}

fn union_levels(tables: &[DataTable], formula: &Formula) -> Result<LevelMap> {
    let mut all = LevelMap::new();
    for t in tables {
        for (name, lv) in formula.levels_in(t)? {
            all.entry(name).or_default().extend(lv);
        }
    }
    for lv in all.values_mut() {
        lv.sort_by(f64::total_cmp);
        lv.dedup();
    }
    Ok(all)
}

struct ReplicateFit {
    names: Vec<String>,
    coef: DVector<f64>,
    cov: DMatrix<f64>,
}

fn fit_logit_formula(t: &DataTable, formula: &Formula, levels: &LevelMap, outcome: &str) -> Result<(ReplicateFit, DVector<f64>, Vec<f64>)> {
    let d = formula.bind(t, levels, &[outcome], true)?;
    let y_col = t.column(outcome)?;
    let y: Vec<f64> = d.rows.iter().map(|&r| y_col[r].expect("bound row")).collect();
    let fit = logit_fit(&d.x, &y)?;
    let score = &d.x * &fit.coef;
    Ok((
        ReplicateFit {
            names: d.names,
            coef: fit.coef,
            cov: fit.cov,
        },
        score,
        y,
    ))
}

fn fit_family(t: &DataTable, formula: &Formula, levels: &LevelMap, family: &Family) -> Result<ReplicateFit> {
    match family {
        Family::Logit { outcome } => Ok(fit_logit_formula(t, formula, levels, outcome)?.0),
        Family::Cox { time, event } => {
            let est = fitters::fit_cox_with_levels(t, time, event, formula, levels)?;
            Ok(ReplicateFit {
                names: est.names,
                coef: est.fit.coef,
                cov: est.fit.cov,
            })
        }
    }
}

fn replicate_tables(table: &DataTable) -> Result<Vec<DataTable>> {
    let layout = completed_layout(table)?;
    (1..=layout.m).map(|m| materialize(table, &layout, m)).collect()
}

/// Fits the substantive model on every completed data set and pools.
pub fn estimate(table: &DataTable, formula: &Formula, family: &Family, exponentiate: bool) -> Result<PooledAnalysis> {
    let tables = replicate_tables(table)?;
    if tables.len() < 2 {
        return Err(Error::InvalidInput("Rubin's rules need at least 2 imputations".into()));
    }
    let levels = union_levels(&tables, formula)?;
    let fits: Vec<ReplicateFit> = tables
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            fit_family(t, formula, &levels, family).map_err(|e| Error::Replicate {
                m: i + 1,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let names = fits[0].names.clone();
    let estimates: Vec<DVector<f64>> = fits.iter().map(|f| f.coef.clone()).collect();
    let covs: Vec<DMatrix<f64>> = fits.iter().map(|f| f.cov.clone()).collect();
    let mut analysis = combine(&names, &estimates, &covs)?;
    analysis.exponentiated = exponentiate;
    analysis.response = match family {
        Family::Logit { outcome } => outcome.clone(),
        Family::Cox { .. } => "_t".into(),
    };
    Ok(analysis)
}

/// Mann–Whitney AUC: the probability that a random case outscores a random
/// non-case, ties counting one half.
pub fn auc(scores: &[f64], outcome: &[f64]) -> Result<f64> {
    if scores.len() != outcome.len() {
        return Err(Error::InvalidInput("scores and outcome differ in length".into()));
    }
    if let Some(bad) = outcome.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(Error::InvalidInput(format!("outcome must be 0/1, found {bad}")));
    }
    let n1 = outcome.iter().filter(|y| **y == 1.0).count();
    let n0 = outcome.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::InvalidInput("AUC is undefined for a constant outcome".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&r| outcome[r] == 1.0).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (n1 as f64, n0 as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// AUC of a logistic model fitted and evaluated on `table`.
pub fn fitted_auc(table: &DataTable, formula: &Formula, outcome: &str) -> Result<f64> {
    let levels = formula.levels_in(table)?;
    let (_, score, y) = fit_logit_formula(table, formula, &levels, outcome)?;
    auc(score.as_slice(), &y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledAuc {
    pub mean: f64,
    pub per_replicate: Vec<f64>,
}

/// Fits the logistic model on each completed data set and averages AUCs.
pub fn pooled_auc(table: &DataTable, formula: &Formula, outcome: &str) -> Result<PooledAuc> {
    let tables = replicate_tables(table)?;
    let levels = union_levels(&tables, formula)?;
    let per_replicate: Vec<f64> = tables
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            fit_logit_formula(t, formula, &levels, outcome)
                .and_then(|(_, score, y)| auc(score.as_slice(), &y))
                .map_err(|e| Error::Replicate {
                    m: i + 1,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let mean = per_replicate.iter().sum::<f64>() / per_replicate.len() as f64;
    Ok(PooledAuc { mean, per_replicate })
}

/// Counts of `values` in `bins` equal-width bins over their range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}
