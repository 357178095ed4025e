use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mifrom_core::exchange::{self, GetOptions, LabeledMatrix, Weighting};
use mifrom_core::formula::{parse_formula, Formula};
use mifrom_core::impute::{self, ImputationSpec};
use mifrom_core::rubin::{self, Family, PooledAnalysis};
use mifrom_core::simulate::{self, SimConfig};
use mifrom_core::tabular::format_value;
use mifrom_core::{fitters, read_table, write_table, Error, ModelKind, PooledImputationModel};

use crate::{AucArgs, EstimateArgs, FamilyArg, FitExportArgs, GetArgs, ImputeArgs, ModelFiles, SimulateArgs};

pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    let s = seed.unwrap_or_else(rand::random);
    println!("seed = {s}");
    s
}

fn echo_no_seed() {
    println!("seed = none (deterministic)");
}

pub fn fit_export(a: FitExportArgs) -> Result<()> {
    echo_no_seed();
    let data = read_table(&a.data)?;
    let fit = fitters::fit_model(a.imodel.into(), &data, &a.ivar, &a.predictors)?;
    exchange::export_model(&fit.coefficients, &a.out_b, &a.out_v)?;
    let c = &fit.coefficients;
    println!("imputation model: {} of {} on {}", c.kind, a.ivar, c.colnames.join(" "));
    println!("observations used: {}", fit.n_obs);
    println!("coefficient rows: {}; covariance blocks: {}", c.coef.nrows(), c.cov.len());
    if let Some(l) = &c.levels {
        let lv: Vec<String> = l.values.iter().map(|v| format_value(*v)).collect();
        println!("levels: {} (reference {})", lv.join(" "), format_value(l.values[l.reference]));
    }
    if fit.perfect_prediction {
        eprintln!("warning: fitted probabilities of 0 or 1 occurred (perfect prediction)");
    }
    println!("wrote {} and {}", a.out_b.display(), a.out_v.display());
    Ok(())
}

fn print_pool_summary(m: &PooledImputationModel) {
    println!(
        "{} model from {} source{}; columns: {}",
        m.coefficients.kind,
        m.n_sources,
        if m.n_sources == 1 { "" } else { "s" },
        m.coefficients.colnames.join(" ")
    );
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn get(a: GetArgs) -> Result<()> {
    echo_no_seed();
    let kind: ModelKind = a.imodel.into();
    if kind == ModelKind::Mlogit && a.values.is_none() {
        return Err(usage("--values is required with --imodel mlogit"));
    }
    if a.b.len() != a.v.len() {
        return Err(usage(format!("{} --b files but {} --v files", a.b.len(), a.v.len())));
    }
    let opts = GetOptions {
        colnames: a.colnames,
        kind,
        values: a.values,
        path: a.path,
        weighting: if a.scalar { Weighting::Scalar } else { Weighting::Multivariate },
    };
    let pooled = exchange::get(&a.b, &a.v, &opts)?;
    exchange::export_model(&pooled.coefficients, &a.out_b, &a.out_v)?;
    print_pool_summary(&pooled);
    println!("wrote {} and {}", a.out_b.display(), a.out_v.display());
    Ok(())
}

/// Loads model files, taking column names and levels from the first
/// coefficient file unless given.
fn load_model(m: &ModelFiles) -> Result<PooledImputationModel> {
    let kind: ModelKind = m.imodel.into();
    if m.b.len() != m.v.len() {
        return Err(usage(format!("{} --b files but {} --v files", m.b.len(), m.v.len())));
    }
    let first = LabeledMatrix::read(&exchange::resolve_path(m.path.as_deref(), &m.b[0]))?;
    let colnames = m.colnames.clone().unwrap_or_else(|| first.col_labels.clone());
    let values = match (&m.values, kind) {
        (Some(v), _) => Some(v.clone()),
        (None, ModelKind::Mlogit) => Some(
            first
                .row_labels
                .iter()
                .map(|l| {
                    l.parse::<f64>()
                        .map_err(|_| usage(format!("row label `{l}` is not a level; pass --values")))
                })
                .collect::<Result<_>>()?,
        ),
        (None, _) => None,
    };
    let opts = GetOptions {
        colnames,
        kind,
        values,
        path: m.path.clone(),
        weighting: Weighting::Multivariate,
    };
    Ok(exchange::get(&m.b, &m.v, &opts)?)
}

fn default_report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report");
    PathBuf::from(s)
}

pub fn impute(a: ImputeArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    if a.add == 0 {
        return Err(usage("--add must be at least 1"));
    }
    let data = read_table(&a.data)?;
    let model = load_model(&a.model)?;
    print_pool_summary(&model);
    let mut spec = ImputationSpec::new(a.ivar, model, a.add, seed);
    spec.touse = a.touse;
    spec.replace = a.replace;
    spec.perturb = a.perturb.into();
    spec.literal_eq7 = a.literal_eq7;
    let run = impute::run(&data, &spec)?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    println!();
    print!("{}", run.report);
    write_table(&run.completed, &a.out)?;
    let report = a.report.unwrap_or_else(|| default_report_path(&a.out));
    write_text(&report, &run.report.to_key_values())?;
    println!("wrote {} and {}", a.out.display(), report.display());
    Ok(())
}

/// Splits off the outcome for logit: `--outcome`, else the first term.
fn logit_formula(formula: &str, outcome: Option<String>) -> Result<(String, Formula)> {
    match outcome {
        Some(o) => Ok((o, parse_formula(formula)?)),
        None => {
            let mut it = formula.split_whitespace();
            let first = it.next().ok_or_else(|| usage("empty formula"))?;
            let rest: Vec<&str> = it.collect();
            if rest.is_empty() {
                return Err(usage("formula needs an outcome and at least one term"));
            }
            Ok((first.to_string(), parse_formula(&rest.join(" "))?))
        }
    }
}

pub fn estimate(a: EstimateArgs) -> Result<()> {
    echo_no_seed();
    let data = read_table(&a.data)?;
    let (family, formula) = match a.family {
        FamilyArg::Logit => {
            let (outcome, f) = logit_formula(&a.formula, a.outcome)?;
            (Family::Logit { outcome }, f)
        }
        FamilyArg::Cox => {
            let (Some(time), Some(event)) = (a.time, a.event) else {
                return Err(usage("--family cox needs --time and --event"));
            };
            (Family::Cox { time, event }, parse_formula(&a.formula)?)
        }
    };
    let pooled = rubin::estimate(&data, &formula, &family, a.eform)?;
    print!("{pooled}");
    let contrasts = contrasts(&pooled, &a.contrasts)?;
    if !contrasts.is_empty() {
        println!();
        println!("Linear combinations:");
        for c in &contrasts {
            println!("{}", pooled.format_row(c));
        }
    }
    if let Some(out) = a.out {
        let mut text = pooled.to_tsv();
        for c in &contrasts {
            text.push_str(&pooled.tsv_row(c));
        }
        write_text(&out, &text)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn contrasts(pooled: &PooledAnalysis, specs: &[String]) -> Result<Vec<rubin::PooledParameter>> {
    specs
        .iter()
        .map(|s| {
            let terms: Vec<&str> = s.split('+').map(str::trim).collect();
            if terms.iter().any(|t| t.is_empty()) {
                return Err(usage(format!("malformed contrast `{s}`")));
            }
            Ok(pooled.contrast(&terms)?)
        })
        .collect()
}

pub fn auc(a: AucArgs) -> Result<()> {
    let data = read_table(&a.data)?;
    let (outcome, formula) = logit_formula(&a.formula, a.outcome)?;
    let completed = match a.add {
        Some(m) => {
            let seed = resolve_seed(a.seed);
            let (Some(ivar), Some(imodel)) = (a.ivar, a.imodel) else {
                return Err(usage("--add needs --ivar, --imodel, --b and --v"));
            };
            if a.b.is_empty() || m == 0 {
                return Err(usage("--add needs at least one imputation and model files"));
            }
            let model = load_model(&ModelFiles {
                b: a.b,
                v: a.v,
                imodel,
                colnames: None,
                values: None,
                path: a.path,
            })?;
            let mut spec = ImputationSpec::new(ivar, model, m, seed);
            spec.replace = true;
            impute::run(&data, &spec)?.completed
        }
        None => {
            echo_no_seed();
            data
        }
    };
    let res = rubin::pooled_auc(&completed, &formula, &outcome)?;
    let lo = res.per_replicate.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = res.per_replicate.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("imputations = {}", res.per_replicate.len());
    println!("mean AUC = {:.4} (range {:.4} to {:.4})", res.mean, lo, hi);
    if let Some(out) = a.out {
        let mut text = String::from("m\tauc\n");
        for (i, v) in res.per_replicate.iter().enumerate() {
            text.push_str(&format!("{}\t{}\n", i + 1, format_value(*v)));
        }
        write_text(&out, &text)?;
        println!("wrote {}", out.display());
    }
    if let Some(path) = a.histogram {
        let mut text = String::from("bin\tcount\n");
        for (lo, hi, n) in rubin::histogram(&res.per_replicate, a.bins) {
            text.push_str(&format!("{}\t{n}\n", format_value(0.5 * (lo + hi))));
        }
        write_text(&path, &text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed);
    if !(1..=3).contains(&a.example) {
        return Err(usage("--example must be 1, 2 or 3"));
    }
    let studies = simulate::generate(&SimConfig {
        example: a.example,
        seed,
        scale: a.scale,
    })?;
    for p in simulate::write_studies(&studies, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
