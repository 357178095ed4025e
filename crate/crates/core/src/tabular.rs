//! Columnar numeric tables with explicit missingness, and the tab-delimited
//! file format shared by every other module.
//!
//! Files are UTF-8 with LF line endings. The first line is a header of
//! unique identifiers; every following line holds exactly one cell per
//! column. A missing value is an empty cell. Numbers are written in the
//! shortest form that parses back to the identical `f64`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Returns true if `name` matches `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Formats a value so that `parse::<f64>()` returns the same bits.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if v.is_finite() && (a == 0.0 || (1e-5..1e16).contains(&a)) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub(crate) fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, String> {
    let cell = cell.trim_matches(' ');
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("not a number: `{cell}`"))
}

/// Splits file contents into lines, accepting a single trailing newline.
/// Empty lines in the body are kept: in a one-column table they are rows
/// holding a missing value.
pub(crate) fn split_lines(text: &str) -> Vec<&str> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Column {
    name: String,
    values: Vec<Option<f64>>,
}

/// Named numeric columns of equal length; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataTable {
    columns: Vec<Column>,
    n_rows: usize,
}

/// Counts of missing cells in one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingnessSummary {
    pub n_total: usize,
    pub n_missing: usize,
    pub fraction_missing: f64,
}

impl MissingnessSummary {
    pub fn is_systematic(&self) -> bool {
        self.n_total > 0 && self.n_missing == self.n_total
    }
}

impl DataTable {
    /// An empty table with a fixed number of rows, to which columns are added.
    pub fn with_rows(n_rows: usize) -> Self {
        DataTable {
            columns: Vec::new(),
            n_rows,
        }
    }

    pub fn from_columns<S: Into<String>>(columns: Vec<(S, Vec<Option<f64>>)>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, |(_, v)| v.len());
        let mut t = DataTable::with_rows(n_rows);
        for (name, values) in columns {
            t.push_column(name, values)?;
        }
        Ok(t)
    }

    /// Builds a table from fully observed columns.
    pub fn from_observed<S: Into<String>>(columns: Vec<(S, Vec<f64>)>) -> Result<Self> {
        Self::from_columns(
            columns
                .into_iter()
                .map(|(n, v)| (n, v.into_iter().map(Some).collect()))
                .collect(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        self.index_of(name)
            .map(|i| self.columns[i].values.as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// The column as plain values; fails on the first missing cell.
    pub fn observed_column(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| Error::MissingValue {
                    row: i + 1,
                    column: name.to_string(),
                })
            })
            .collect()
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        let name = name.into();
        if !is_identifier(&name) {
            return Err(Error::Schema(format!("invalid column name `{name}`")));
        }
        if self.has_column(&name) {
            return Err(Error::Schema(format!("duplicate column `{name}`")));
        }
        if self.columns.is_empty() && self.n_rows == 0 {
            self.n_rows = values.len();
        }
        if values.len() != self.n_rows {
            return Err(Error::Schema(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.n_rows
            )));
        }
        self.columns.push(Column { name, values });
        Ok(())
    }

    /// Replaces the values of an existing column, or appends it.
    pub fn set_column(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        match self.index_of(name) {
            Some(i) => {
                if values.len() != self.n_rows {
                    return Err(Error::Schema(format!(
                        "column `{name}` has {} rows, table has {}",
                        values.len(),
                        self.n_rows
                    )));
                }
                self.columns[i].values = values;
                Ok(())
            }
            None => self.push_column(name, values),
        }
    }

    /// Drops every column for which `pred` returns true.
    pub fn retain_columns(&mut self, mut pred: impl FnMut(&str) -> bool) {
        self.columns.retain(|c| pred(&c.name));
    }

    pub fn missingness(&self, name: &str) -> Result<MissingnessSummary> {
        let col = self.column(name)?;
        let n_missing = col.iter().filter(|v| v.is_none()).count();
        let n_total = col.len();
        let fraction_missing = if n_total == 0 {
            0.0
        } else {
            n_missing as f64 / n_total as f64
        };
        Ok(MissingnessSummary {
            n_total,
            n_missing,
            fraction_missing,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let header: Vec<&str> = self.names().collect();
        out.push_str(&header.join("\t"));
        out.push('\n');
        for r in 0..self.n_rows {
            for (j, c) in self.columns.iter().enumerate() {
                if j > 0 {
                    out.push('\t');
                }
                if let Some(v) = c.values[r] {
                    let _ = write!(out, "{}", format_value(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let lines = split_lines(text);
        let header = lines
            .first()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| Error::format(origin, 1, "missing header"))?;
        let names: Vec<&str> = header.split('\t').collect();
        let mut seen = HashSet::new();
        for n in &names {
            if !is_identifier(n) {
                return Err(Error::format(origin, 1, format!("invalid column name `{n}`")));
            }
            if !seen.insert(*n) {
                return Err(Error::Schema(format!(
                    "{}: duplicate column `{n}` in header",
                    origin.display()
                )));
            }
        }
        let n_rows = lines.len() - 1;
        let mut values: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(n_rows); names.len()];
        for (i, line) in lines.iter().enumerate().skip(1) {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != names.len() {
                return Err(Error::format(
                    origin,
                    i + 1,
                    format!("expected {} cells, found {}", names.len(), cells.len()),
                ));
            }
            for (j, cell) in cells.iter().enumerate() {
                let v = parse_cell(cell).map_err(|m| Error::format(origin, i + 1, m))?;
                values[j].push(v);
            }
        }
        let mut t = DataTable::with_rows(n_rows);
        for (n, v) in names.into_iter().zip(values) {
            t.push_column(n, v)?;
        }
        Ok(t)
    }
}

pub fn read_table(path: impl AsRef<Path>) -> Result<DataTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DataTable::parse_tsv(&text, path)
}

pub fn write_table(table: &DataTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table.to_tsv()).map_err(|e| Error::io(path, e))
}
