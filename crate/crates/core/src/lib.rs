//! Multiple imputation from imputation models estimated in external
//! studies.
//!
//! Donor studies fit an imputation model ([`fitters`]) and export its
//! coefficients and covariance ([`exchange`]). A recipient study pools one
//! or more exported models, fills in its missing values `M` times
//! ([`impute`]) and combines substantive-model estimates across the
//! completed data sets with Rubin's rules ([`rubin`]). No individual-level
//! data leaves a study.

pub mod error;
pub mod exchange;
pub mod fitters;
pub mod formula;
pub mod impute;
pub mod linalg;
pub mod model;
pub mod rubin;
pub mod simulate;
pub mod tabular;

pub use error::{Error, Result};
pub use model::{FittedImputationModel, Levels, ModelCoefficients, ModelKind, PooledImputationModel};
pub use tabular::{read_table, write_table, DataTable, MissingnessSummary};
