//! Model formulas for substantive models.
//!
//! Terms are separated by whitespace. `name` is a main effect, `i.name`
//! expands to indicators of every level of `name` except the smallest, and
//! `a#b` multiplies two such factors. Indicator and product columns are
//! recomputed from the data each time a formula is bound, so they follow
//! whatever values an imputed column currently holds.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tabular::{format_value, is_identifier, DataTable};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Factor {
    Main(String),
    Indicator(String),
}

impl Factor {
    pub fn variable(&self) -> &str {
        match self {
            Factor::Main(n) | Factor::Indicator(n) => n,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Main(n) => f.write_str(n),
            Factor::Indicator(n) => write!(f, "i.{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Single(Factor),
    Product(Factor, Factor),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub terms: Vec<Term>,
}

fn parse_factor(tok: &str, whole: &str) -> Result<Factor> {
    let (name, indicator) = match tok.strip_prefix("i.") {
        Some(rest) => (rest, true),
        None => (tok, false),
    };
    if !is_identifier(name) {
        return Err(Error::InvalidInput(format!("unknown token `{whole}` in formula")));
    }
    Ok(if indicator {
        Factor::Indicator(name.to_string())
    } else {
        Factor::Main(name.to_string())
    })
}

pub fn parse_formula(text: &str) -> Result<Formula> {
    let mut terms = Vec::new();
    for tok in text.split_whitespace() {
        let parts: Vec<&str> = tok.split('#').collect();
        let term = match parts.as_slice() {
            [one] => Term::Single(parse_factor(one, tok)?),
            [a, b] => Term::Product(parse_factor(a, tok)?, parse_factor(b, tok)?),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "unknown token `{tok}` in formula (at most one `#` per term)"
                )))
            }
        };
        terms.push(term);
    }
    if terms.is_empty() {
        return Err(Error::InvalidInput("empty formula".into()));
    }
    Ok(Formula { terms })
}

/// Observed levels of each variable used with `i.`, sorted ascending.
pub type LevelMap = BTreeMap<String, Vec<f64>>;

/// A formula evaluated on a table: one column per expanded term, over the
/// rows where every referenced variable is observed.
#[derive(Debug, Clone)]
pub struct BoundDesign {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub rows: Vec<usize>,
}

struct Expanded {
    name: String,
    values: Vec<f64>,
}

impl Formula {
    /// Every variable the formula reads, in first-use order.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut add = |f: &Factor| {
            if !out.iter().any(|v| v == f.variable()) {
                out.push(f.variable().to_string());
            }
        };
        for t in &self.terms {
            match t {
                Term::Single(f) => add(f),
                Term::Product(a, b) => {
                    add(a);
                    add(b);
                }
            }
        }
        out
    }

    pub fn indicator_variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.terms {
            let fs: Vec<&Factor> = match t {
                Term::Single(f) => vec![f],
                Term::Product(a, b) => vec![a, b],
            };
            for f in fs {
                if let Factor::Indicator(n) = f {
                    if !out.contains(n) {
                        out.push(n.clone());
                    }
                }
            }
        }
        out
    }

    /// Levels observed for each `i.` variable in `table`.
    pub fn levels_in(&self, table: &DataTable) -> Result<LevelMap> {
        let mut map = LevelMap::new();
        for name in self.indicator_variables() {
            let mut lv: Vec<f64> = table.column(&name)?.iter().flatten().copied().collect();
            lv.sort_by(f64::total_cmp);
            lv.dedup();
            map.insert(name, lv);
        }
        Ok(map)
    }

    fn expand(factor: &Factor, table: &DataTable, levels: &LevelMap, rows: &[usize]) -> Result<Vec<Expanded>> {
        let col = table.column(factor.variable())?;
        match factor {
            Factor::Main(n) => Ok(vec![Expanded {
                name: n.clone(),
                values: rows.iter().map(|&r| col[r].expect("complete row")).collect(),
            }]),
            Factor::Indicator(n) => {
                let lv = levels
                    .get(n)
                    .ok_or_else(|| Error::InvalidInput(format!("no levels known for `i.{n}`")))?;
                Ok(lv
                    .iter()
                    .skip(1)
                    .map(|&l| Expanded {
                        name: format!("{}.{n}", format_value(l)),
                        values: rows
                            .iter()
                            .map(|&r| if col[r] == Some(l) { 1.0 } else { 0.0 })
                            .collect(),
                    })
                    .collect())
            }
        }
    }

    /// Evaluates the formula on `table`, dropping rows where any of the
    /// formula's variables or `extra` (e.g. the response) is missing.
    pub fn bind(&self, table: &DataTable, levels: &LevelMap, extra: &[&str], intercept: bool) -> Result<BoundDesign> {
        let mut needed = self.variables();
        needed.extend(extra.iter().map(|s| s.to_string()));
        let cols: Vec<&[Option<f64>]> = needed.iter().map(|n| table.column(n)).collect::<Result<_>>()?;
        let rows: Vec<usize> = (0..table.n_rows())
            .filter(|&r| cols.iter().all(|c| c[r].is_some()))
            .collect();
        let mut expanded: Vec<Expanded> = Vec::new();
        for t in &self.terms {
            match t {
                Term::Single(f) => expanded.extend(Self::expand(f, table, levels, &rows)?),
                Term::Product(a, b) => {
                    let ea = Self::expand(a, table, levels, &rows)?;
                    let eb = Self::expand(b, table, levels, &rows)?;
                    for u in &ea {
                        for v in &eb {
                            expanded.push(Expanded {
                                name: format!("{}#{}", u.name, v.name),
                                values: u.values.iter().zip(&v.values).map(|(p, q)| p * q).collect(),
                            });
                        }
                    }
                }
            }
        }
        for (i, e) in expanded.iter().enumerate() {
            if expanded[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::InvalidInput(format!("term `{}` appears twice", e.name)));
            }
        }
        if intercept {
            expanded.push(Expanded {
                name: crate::model::CONS.to_string(),
                values: vec![1.0; rows.len()],
            });
        }
        let x = DMatrix::from_fn(rows.len(), expanded.len(), |i, j| expanded[j].values[i]);
        Ok(BoundDesign {
            names: expanded.into_iter().map(|e| e.name).collect(),
            x,
            rows,
        })
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match t {
                Term::Single(a) => write!(f, "{a}")?,
                Term::Product(a, b) => write!(f, "{a}#{b}")?,
            }
        }
        Ok(())
    }
}
