use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mifrom_core::impute::PerturbMode;
use mifrom_core::ModelKind;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mifrom")]
#[command(about = "Multiple imputation from imputation models estimated in external studies", long_about = None)]
#[command(arg_required_else_help = true, version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an imputation model in a donor study and export its coefficient files.
    FitExport(FitExportArgs),
    /// Read one or more exported models and pool them.
    Get(GetArgs),
    /// Impute a variable M times from a (pooled) external model.
    Impute(ImputeArgs),
    /// Fit a model on every completed data set and combine with Rubin's rules.
    Estimate(EstimateArgs),
    /// Area under the ROC curve across completed data sets.
    Auc(AucArgs),
    /// Write the simulated studies of a worked example.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Imodel {
    Qreg,
    Logit,
    Mlogit,
}

impl From<Imodel> for ModelKind {
    fn from(m: Imodel) -> Self {
        match m {
            Imodel::Qreg => ModelKind::Qreg,
            Imodel::Logit => ModelKind::Logit,
            Imodel::Mlogit => ModelKind::Mlogit,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PerturbArg {
    Full,
    Diag,
}

impl From<PerturbArg> for PerturbMode {
    fn from(p: PerturbArg) -> Self {
        match p {
            PerturbArg::Full => PerturbMode::Full,
            PerturbArg::Diag => PerturbMode::Diagonal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Logit,
    Cox,
}

#[derive(Args, Debug)]
struct FitExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ivar: String,
    #[arg(long, num_args = 1.., required = true)]
    predictors: Vec<String>,
    #[arg(long, value_enum)]
    imodel: Imodel,
    #[arg(long = "out-b")]
    out_b: PathBuf,
    #[arg(long = "out-v")]
    out_v: PathBuf,
}

#[derive(Args, Debug)]
struct GetArgs {
    /// Coefficient files; `.txt` is appended when a name has no extension.
    #[arg(long, num_args = 1.., required = true)]
    b: Vec<String>,
    /// Covariance files, in the same order as `--b`.
    #[arg(long, num_args = 1.., required = true)]
    v: Vec<String>,
    /// Column names in order, ending with `_cons`.
    #[arg(long, num_args = 1.., required = true)]
    colnames: Vec<String>,
    #[arg(long, value_enum)]
    imodel: Imodel,
    /// Levels of the imputed variable (required with `--imodel mlogit`).
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    values: Option<Vec<f64>>,
    /// Directory holding the files.
    #[arg(long)]
    path: Option<PathBuf>,
    /// Weight each coefficient by its own variance instead of the full covariance.
    #[arg(long)]
    scalar: bool,
    #[arg(long = "out-b")]
    out_b: PathBuf,
    #[arg(long = "out-v")]
    out_v: PathBuf,
}

#[derive(Args, Debug)]
struct ModelFiles {
    /// Coefficient file(s); several are pooled first.
    #[arg(long, num_args = 1.., required = true)]
    b: Vec<String>,
    #[arg(long, num_args = 1.., required = true)]
    v: Vec<String>,
    #[arg(long, value_enum)]
    imodel: Imodel,
    /// Defaults to the coefficient file header.
    #[arg(long, num_args = 1..)]
    colnames: Option<Vec<String>>,
    /// Defaults to the coefficient file row labels.
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    values: Option<Vec<f64>>,
    #[arg(long)]
    path: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ivar: String,
    #[command(flatten)]
    model: ModelFiles,
    /// Number of imputations to add.
    #[arg(long, default_value_t = 1)]
    add: usize,
    /// Random seed; drawn and echoed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// 0/1 column restricting the rows imputed.
    #[arg(long)]
    touse: Option<String>,
    /// Replace existing imputations of the variable.
    #[arg(long)]
    replace: bool,
    #[arg(long, value_enum, default_value_t = PerturbArg::Full)]
    perturb: PerturbArg,
    /// Impute 1 when U > theta instead of U < theta.
    #[arg(long = "literal-eq7")]
    literal_eq7: bool,
    /// Accepted for compatibility; all computation is in double precision.
    #[arg(long)]
    double: bool,
    #[arg(long)]
    out: PathBuf,
    /// key=value report; defaults to `<out>.report`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Terms separated by spaces: `x`, `i.z`, `x#i.z`. For logit the first
    /// term is the outcome unless `--outcome` is given.
    #[arg(long)]
    formula: String,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    time: Option<String>,
    #[arg(long)]
    event: Option<String>,
    #[arg(long)]
    eform: bool,
    /// Sums of coefficients to report, e.g. `x+x#1.z`.
    #[arg(long, num_args = 1..)]
    contrasts: Vec<String>,
    /// Pooled table as TSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AucArgs {
    /// Completed data, or incomplete data when `--add` is given.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    formula: String,
    #[arg(long)]
    outcome: Option<String>,
    /// Impute this many times first (needs `--ivar` and model files).
    #[arg(long)]
    add: Option<usize>,
    #[arg(long)]
    ivar: Option<String>,
    #[arg(long, num_args = 1..)]
    b: Vec<String>,
    #[arg(long, num_args = 1..)]
    v: Vec<String>,
    #[arg(long, value_enum)]
    imodel: Option<Imodel>,
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-replicate AUCs as TSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram of the AUCs as TSV (bin, count).
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    example: u8,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplier on the reference study sizes.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::FitExport(a) => commands::fit_export(a),
        Command::Get(a) => commands::get(a),
        Command::Impute(a) => commands::impute(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Auc(a) => commands::auc(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
