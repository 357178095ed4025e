//! Coefficient-file exchange between studies.
//!
//! A model travels as two tab-delimited files. The coefficient file has a
//! header `row` followed by the column names and one labelled row per
//! coefficient set: `q01`…`q99` for quantile models, `b` for logistic
//! models, and the numeric level value for multinomial models (the
//! reference level is the all-zero row). The covariance file stacks the
//! square covariance blocks; its rows are labelled `<rowlabel>:<colname>`.
//! For quantile and logistic models the header repeats the column names;
//! for a multinomial model, whose single block spans every non-reference
//! level, the header carries the same `<level>:<colname>` labels as the
//! rows.
//!
//! Several exported models with identical layout can be pooled by
//! fixed-effect inverse-variance weighting, block by block.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Levels, ModelCoefficients, ModelKind, PooledImputationModel, N_QUANTILES};
use crate::tabular::{format_value, parse_cell, split_lines};

/// Condition number above which a source covariance block is ridge-stabilized.
pub const MAX_CONDITION: f64 = 1e12;

/// A matrix with row labels and column labels, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub col_labels: Vec<String>,
    pub row_labels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledMatrix {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.col_labels {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for c in 0..self.values.ncols() {
                let _ = write!(out, "\t{}", format_value(self.values[(r, c)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let lines = split_lines(text);
        let header: Vec<&str> = lines[0].split('\t').collect();
        if header.first() != Some(&"row") || header.len() < 2 {
            return Err(Error::format(origin, 1, "header must start with `row` and name at least one column"));
        }
        let col_labels: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
        let mut row_labels = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != header.len() {
                return Err(Error::format(
                    origin,
                    i + 1,
                    format!("expected {} cells, found {}", header.len(), cells.len()),
                ));
            }
            row_labels.push(cells[0].to_string());
            for cell in &cells[1..] {
                let v = parse_cell(cell)
                    .map_err(|m| Error::format(origin, i + 1, m))?
                    .ok_or_else(|| Error::format(origin, i + 1, "empty cell in coefficient file"))?;
                data.push(v);
            }
        }
        Ok(LabeledMatrix {
            values: DMatrix::from_row_slice(row_labels.len(), col_labels.len(), &data),
            col_labels,
            row_labels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

fn block_labels(m: &ModelCoefficients, b: usize) -> Vec<String> {
    let labels = m.row_labels();
    m.block_rows(b)
        .into_iter()
        .flat_map(|r| m.colnames.iter().map(move |c| (r, c)))
        .map(|(r, c)| format!("{}:{c}", labels[r]))
        .collect()
}

/// The coefficient file contents.
pub fn coefficient_matrix(m: &ModelCoefficients) -> LabeledMatrix {
    LabeledMatrix {
        col_labels: m.colnames.clone(),
        row_labels: m.row_labels(),
        values: m.coef.clone(),
    }
}

/// The covariance file contents: blocks stacked vertically.
pub fn covariance_matrix(m: &ModelCoefficients) -> LabeledMatrix {
    let dim = m.cov.first().map_or(0, |b| b.ncols());
    let col_labels = match m.kind {
        ModelKind::Mlogit => block_labels(m, 0),
        ModelKind::Qreg | ModelKind::Logit => m.colnames.clone(),
    };
    let mut row_labels = Vec::new();
    let total: usize = m.cov.iter().map(|b| b.nrows()).sum();
    let mut values = DMatrix::zeros(total, dim);
    let mut offset = 0;
    for (b, block) in m.cov.iter().enumerate() {
        row_labels.extend(block_labels(m, b));
        values.rows_mut(offset, block.nrows()).copy_from(block);
        offset += block.nrows();
    }
    LabeledMatrix {
        col_labels,
        row_labels,
        values,
    }
}

pub fn export_model(m: &ModelCoefficients, b_path: impl AsRef<Path>, v_path: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    let (b_path, v_path) = (b_path.as_ref(), v_path.as_ref());
    fs::write(b_path, coefficient_matrix(m).to_tsv()).map_err(|e| Error::io(b_path, e))?;
    fs::write(v_path, covariance_matrix(m).to_tsv()).map_err(|e| Error::io(v_path, e))?;
    Ok(())
}

/// Rebuilds model coefficients from parsed coefficient and covariance files.
pub fn model_from_matrices(
    b: &LabeledMatrix,
    v: &LabeledMatrix,
    colnames: &[String],
    kind: ModelKind,
    values: Option<&[f64]>,
    origin: &Path,
) -> Result<ModelCoefficients> {
    let where_ = origin.display();
    if b.col_labels != colnames {
        return Err(Error::Schema(format!(
            "{where_}: file columns {:?} do not match colnames {:?} (names and order must agree)",
            b.col_labels, colnames
        )));
    }
    let levels = match kind {
        ModelKind::Qreg => {
            let expected: Vec<String> = (1..=N_QUANTILES).map(|q| format!("q{q:02}")).collect();
            if b.row_labels != expected {
                return Err(Error::Schema(format!("{where_}: qreg file needs rows q01..q99 in order")));
            }
            None
        }
        ModelKind::Logit => {
            if b.row_labels != ["b"] {
                return Err(Error::Schema(format!("{where_}: logit file needs a single row `b`")));
            }
            None
        }
        ModelKind::Mlogit => {
            let given = values.ok_or_else(|| {
                Error::InvalidInput("values of the categorical variable are required for mlogit".into())
            })?;
            let parsed: Vec<f64> = b
                .row_labels
                .iter()
                .map(|l| {
                    l.parse::<f64>()
                        .map_err(|_| Error::Schema(format!("{where_}: row label `{l}` is not a level value")))
                })
                .collect::<Result<_>>()?;
            if parsed.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Schema(format!("{where_}: level rows must be in increasing order")));
            }
            let mut want = given.to_vec();
            want.sort_by(f64::total_cmp);
            if want != parsed {
                return Err(Error::Schema(format!(
                    "{where_}: values {given:?} do not match file levels {parsed:?}"
                )));
            }
            let zero: Vec<usize> = (0..b.values.nrows())
                .filter(|&r| b.values.row(r).iter().all(|v| *v == 0.0))
                .collect();
            let reference = match zero.as_slice() {
                [r] => *r,
                [] => return Err(Error::Schema(format!("{where_}: no all-zero reference row"))),
                _ => return Err(Error::Schema(format!("{where_}: more than one all-zero row"))),
            };
            Some(Levels {
                values: parsed,
                reference,
            })
        }
    };
    let mut m = ModelCoefficients {
        kind,
        colnames: colnames.to_vec(),
        coef: b.values.clone(),
        cov: Vec::new(),
        levels,
    };
    let expected = covariance_matrix(&ModelCoefficients {
        cov: (0..m.n_blocks())
            .map(|bk| {
                let d = m.block_rows(bk).len() * m.n_params();
                DMatrix::zeros(d, d)
            })
            .collect(),
        ..m.clone()
    });
    if v.col_labels != expected.col_labels || v.row_labels != expected.row_labels {
        return Err(Error::Schema(format!(
            "{where_}: covariance file layout does not match the coefficient file"
        )));
    }
    let mut offset = 0;
    for bk in 0..m.n_blocks() {
        let d = m.block_rows(bk).len() * m.n_params();
        m.cov.push(v.values.rows(offset, d).into_owned());
        offset += d;
    }
    m.validate()?;
    Ok(m)
}

pub fn import_model(
    b_path: &Path,
    v_path: &Path,
    colnames: &[String],
    kind: ModelKind,
    values: Option<&[f64]>,
) -> Result<ModelCoefficients> {
    let b = LabeledMatrix::read(b_path)?;
    let v = LabeledMatrix::read(v_path)?;
    model_from_matrices(&b, &v, colnames, kind, values, b_path)
}

/// Joins `name` to `dir` and appends `.txt` when the name has no extension.
pub fn resolve_path(dir: Option<&Path>, name: &str) -> PathBuf {
    let mut p = match dir {
        Some(d) => d.join(name),
        None => PathBuf::from(name),
    };
    if p.extension().is_none() {
        p.set_extension("txt");
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Full-covariance generalized least squares per block.
    #[default]
    Multivariate,
    /// Each coefficient weighted by its own inverse variance.
    Scalar,
}

#[derive(Debug, Clone)]
pub struct GetOptions {
    pub colnames: Vec<String>,
    pub kind: ModelKind,
    pub values: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
    pub weighting: Weighting,
}

/// Reads coefficient/covariance file pairs and pools them.
pub fn get<S: AsRef<str>>(b_files: &[S], v_files: &[S], opts: &GetOptions) -> Result<PooledImputationModel> {
    if b_files.is_empty() {
        return Err(Error::InvalidInput("no coefficient files given".into()));
    }
    if b_files.len() != v_files.len() {
        return Err(Error::InvalidInput(format!(
            "{} coefficient files but {} covariance files",
            b_files.len(),
            v_files.len()
        )));
    }
    if opts.kind == ModelKind::Mlogit && opts.values.is_none() {
        return Err(Error::InvalidInput("values of the categorical variable are required for mlogit".into()));
    }
    let dir = opts.path.as_deref();
    let sources: Vec<ModelCoefficients> = b_files
        .iter()
        .zip(v_files)
        .map(|(b, v)| {
            import_model(
                &resolve_path(dir, b.as_ref()),
                &resolve_path(dir, v.as_ref()),
                &opts.colnames,
                opts.kind,
                opts.values.as_deref(),
            )
        })
        .collect::<Result<_>>()?;
    let (coefficients, warnings) = pool(&sources, opts.weighting)?;
    Ok(PooledImputationModel {
        coefficients,
        n_sources: sources.len(),
        warnings,
    })
}

fn canonical_key(m: &ModelCoefficients) -> Vec<u64> {
    m.coef
        .iter()
        .chain(m.cov.iter().flat_map(|b| b.iter()))
        .map(|v| v.to_bits())
        .collect()
}

/// Inverse of a source block, ridge-stabilized when ill-conditioned.
fn source_precision(block: &DMatrix<f64>, source: usize, b: usize, warnings: &mut Vec<String>) -> Result<DMatrix<f64>> {
    let cond = linalg::condition_number(block);
    let mut phi = block.clone();
    if cond > MAX_CONDITION {
        let dim = phi.nrows() as f64;
        let ridge = 1e-10 * phi.trace() / dim;
        if !(ridge > 0.0) {
            return Err(Error::Numerical(format!(
                "source {} block {b}: zero covariance cannot be inverse-variance weighted",
                source + 1
            )));
        }
        for d in 0..phi.nrows() {
            phi[(d, d)] += ridge;
        }
        warnings.push(format!(
            "source {} block {b}: covariance ill-conditioned (condition {cond:.3e}); added ridge {ridge:.3e}",
            source + 1
        ));
    }
    linalg::spd_inverse(&phi).ok_or_else(|| {
        Error::Numerical(format!("source {} block {b}: covariance not invertible after ridge", source + 1))
    })
}

/// Fixed-effect pooling of models with identical layout.
///
/// A single source is returned unchanged. Sources are put in a canonical
/// order first so the result does not depend on the order given.
pub fn pool(sources: &[ModelCoefficients], weighting: Weighting) -> Result<(ModelCoefficients, Vec<String>)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to pool".into()))?;
    for s in sources {
        s.validate()?;
        if s.kind != first.kind || s.colnames != first.colnames || s.levels != first.levels {
            return Err(Error::Schema("pooled models must share kind, column names and levels".into()));
        }
    }
    if sources.len() == 1 {
        return Ok((first.clone(), Vec::new()));
    }
    let mut ordered: Vec<&ModelCoefficients> = sources.iter().collect();
    ordered.sort_by_cached_key(|m| canonical_key(m));

    let mut warnings = Vec::new();
    let mut out = first.clone();
    for b in 0..first.n_blocks() {
        let rows = first.block_rows(b);
        let dim = first.cov[b].nrows();
        let (gamma, phi) = match weighting {
            Weighting::Multivariate => {
                let mut precision = DMatrix::zeros(dim, dim);
                let mut weighted = DVector::zeros(dim);
                for (j, s) in ordered.iter().enumerate() {
                    let p = source_precision(&s.cov[b], j, b, &mut warnings)?;
                    weighted += &p * s.block_vector(b);
                    precision += p;
                }
                let phi = linalg::spd_inverse(&precision)
                    .ok_or_else(|| Error::Numerical(format!("block {b}: summed precision not invertible")))?;
                let gamma = &phi * weighted;
                (gamma, phi)
            }
            Weighting::Scalar => {
                let mut wsum = DVector::zeros(dim);
                let mut weighted = DVector::zeros(dim);
                for s in &ordered {
                    let g = s.block_vector(b);
                    for d in 0..dim {
                        let var = s.cov[b][(d, d)];
                        if !(var > 0.0) {
                            return Err(Error::Numerical(format!(
                                "block {b}: nonpositive variance cannot be inverse-variance weighted"
                            )));
                        }
                        wsum[d] += 1.0 / var;
                        weighted[d] += g[d] / var;
                    }
                }
                let gamma = weighted.component_div(&wsum);
                let phi = DMatrix::from_diagonal(&wsum.map(|w| 1.0 / w));
                (gamma, phi)
            }
        };
        ModelCoefficients::set_block_vector(&mut out.coef, &rows, &gamma);
        out.cov[b] = phi;
    }
    out.validate()?;
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CONS;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn logit_model(coef: &[f64], cov: DMatrix<f64>) -> ModelCoefficients {
        ModelCoefficients {
            kind: ModelKind::Logit,
            colnames: names(&["y", "x", "c", CONS]),
            coef: DMatrix::from_row_slice(1, 4, coef),
            cov: vec![cov],
            levels: None,
        }
    }

    fn scalar(gamma: f64, var: f64) -> ModelCoefficients {
        ModelCoefficients {
            kind: ModelKind::Logit,
            colnames: names(&[CONS]),
            coef: DMatrix::from_element(1, 1, gamma),
            cov: vec![DMatrix::from_element(1, 1, var)],
            levels: None,
        }
    }

    fn spd(seed: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64 * seed).sin());
        &a * a.transpose() + DMatrix::identity(4, 4) * 0.5
    }

    #[test]
    fn logit_export_layout() {
        let m = logit_model(&[0.1, -0.2, 0.3, -1.5], spd(0.7));
        let b = coefficient_matrix(&m).to_tsv();
        let lines: Vec<&str> = b.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "row\ty\tx\tc\t_cons");
        assert_eq!(lines[1].split('\t').count(), 5);
        let v = covariance_matrix(&m).to_tsv();
        assert!(v.lines().nth(1).unwrap().starts_with("b:y\t"));
    }

    #[test]
    fn two_scalar_sources_hand_computed() {
        let (m, w) = pool(&[scalar(0.0, 1.0), scalar(3.0, 0.5)], Weighting::Multivariate).unwrap();
        assert!(w.is_empty());
        assert!((m.coef[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((m.cov[0][(0, 0)] - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn identical_sources_halve_variance() {
        let a = logit_model(&[0.1, -0.2, 0.3, -1.5], spd(0.3));
        let (m, _) = pool(&[a.clone(), a.clone()], Weighting::Multivariate).unwrap();
        assert!((&m.coef - &a.coef).amax() < 1e-12);
        assert!((&m.cov[0] - &a.cov[0] * 0.5).amax() < 1e-12);
    }

    #[test]
    fn single_source_is_identity() {
        let a = logit_model(&[0.1, -0.2, 0.3, -1.5], spd(0.9));
        let (m, _) = pool(std::slice::from_ref(&a), Weighting::Multivariate).unwrap();
        assert_eq!(m, a);
    }

    #[test]
    fn diagonal_covariances_make_modes_agree() {
        let d1 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 2.0, 0.1]));
        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.2, 2.0, 0.4]));
        let a = logit_model(&[0.1, -0.2, 0.3, -1.5], d1);
        let b = logit_model(&[0.4, 0.2, -0.3, -1.0], d2);
        let (g, _) = pool(&[a.clone(), b.clone()], Weighting::Multivariate).unwrap();
        let (s, _) = pool(&[a, b], Weighting::Scalar).unwrap();
        assert!((&g.coef - &s.coef).amax() < 1e-12);
        assert!((&g.cov[0] - &s.cov[0]).amax() < 1e-12);
    }

    #[test]
    fn pooling_is_order_independent() {
        let srcs = [
            logit_model(&[0.1, -0.2, 0.3, -1.5], spd(0.3)),
            logit_model(&[0.2, -0.1, 0.5, -1.2], spd(0.6)),
            logit_model(&[0.0, -0.4, 0.1, -1.9], spd(1.1)),
        ];
        let (a, _) = pool(&srcs, Weighting::Multivariate).unwrap();
        let rev: Vec<_> = srcs.iter().rev().cloned().collect();
        let (b, _) = pool(&rev, Weighting::Multivariate).unwrap();
        assert_eq!(canonical_key(&a), canonical_key(&b));
        for s in &srcs {
            for d in 0..4 {
                assert!(a.cov[0][(d, d)] <= s.cov[0][(d, d)] + 1e-10);
            }
        }
    }

    #[test]
    fn ill_conditioned_source_is_ridged_with_warning() {
        let v = DVector::from_vec(vec![1.0, 2.0, 0.5, -1.0]);
        let singular = &v * v.transpose();
        let a = logit_model(&[0.1, -0.2, 0.3, -1.5], singular);
        let b = logit_model(&[0.2, -0.1, 0.5, -1.2], spd(0.6));
        let (_, w) = pool(&[a, b], Weighting::Multivariate).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn mismatched_colnames_rejected() {
        let m = logit_model(&[0.1, -0.2, 0.3, -1.5], spd(0.7));
        let b = coefficient_matrix(&m);
        let v = covariance_matrix(&m);
        let swapped = names(&["x", "y", "c", CONS]);
        let err = model_from_matrices(&b, &v, &swapped, ModelKind::Logit, None, Path::new("b")).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn mlogit_files_need_values_and_reference() {
        let m = ModelCoefficients {
            kind: ModelKind::Mlogit,
            colnames: names(&["x", CONS]),
            coef: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, -1.0, 1.5, 0.25]),
            cov: vec![spd(0.2)],
            levels: Some(Levels {
                values: vec![0.0, 1.0, 2.0],
                reference: 0,
            }),
        };
        let b = coefficient_matrix(&m);
        let v = covariance_matrix(&m);
        assert_eq!(v.col_labels[0], "1:x");
        let cols = names(&["x", CONS]);
        let back = model_from_matrices(&b, &v, &cols, ModelKind::Mlogit, Some(&[0.0, 1.0, 2.0]), Path::new("b")).unwrap();
        assert_eq!(back, m);
        assert!(model_from_matrices(&b, &v, &cols, ModelKind::Mlogit, None, Path::new("b")).is_err());
        assert!(model_from_matrices(&b, &v, &cols, ModelKind::Mlogit, Some(&[0.0, 1.0, 3.0]), Path::new("b")).is_err());
        let mut no_ref = b.clone();
        no_ref.values[(0, 0)] = 0.1;
        assert!(model_from_matrices(&no_ref, &v, &cols, ModelKind::Mlogit, Some(&[0.0, 1.0, 2.0]), Path::new("b")).is_err());
    }

    #[test]
    fn path_resolution() {
        assert_eq!(resolve_path(None, "b_study2"), PathBuf::from("b_study2.txt"));
        assert_eq!(resolve_path(Some(Path::new("/d")), "v.tsv"), PathBuf::from("/d/v.tsv"));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let m = logit_model(&[0.1, -0.2, 1.0 / 3.0, -1.5e-7], spd(0.7) * 1e-3);
        let dir = tempfile::tempdir().unwrap();
        export_model(&m, dir.path().join("b.txt"), dir.path().join("v.txt")).unwrap();
        let opts = GetOptions {
            colnames: m.colnames.clone(),
            kind: ModelKind::Logit,
            values: None,
            path: Some(dir.path().to_path_buf()),
            weighting: Weighting::Multivariate,
        };
        let back = get(&["b"], &["v"], &opts).unwrap();
        assert_eq!(canonical_key(&back.coefficients), canonical_key(&m));
        assert!(get(&["b", "b"], &["v"], &opts).is_err());
    }
}
