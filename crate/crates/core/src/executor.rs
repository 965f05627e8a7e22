//! Executes WikiSQL ASTs against in-memory tables.
//!
//! Equality is case-insensitive after trimming, and numeric when the column
//! is `real` and both sides parse as numbers. `>`/`<` are numeric only.

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::data::{parse_number, Cell, Table};
use crate::sql::{Aggregation, ColumnRef, ColumnType, Condition, Operator, SqlQuery, MAX_CONDITIONS};

/// Relative tolerance for numeric equality.
pub const NUMERIC_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExecErrorKind {
    UnknownColumn,
    TypeMismatch,
    MalformedQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {detail}")]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub detail: String,
}

impl ExecError {
    fn new(kind: ExecErrorKind, detail: impl Into<String>) -> Self {
        ExecError { kind, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Datum {
    Number(f64),
    Text(String),
}

impl Datum {
    fn rank(&self) -> u8 {
        match self {
            Datum::Number(_) => 0,
            Datum::Text(_) => 1,
        }
    }

    fn total_cmp(&self, other: &Datum) -> Ordering {
        match (self, other) {
            (Datum::Number(a), Datum::Number(b)) => a.total_cmp(b),
            (Datum::Text(a), Datum::Text(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    fn matches(&self, other: &Datum) -> bool {
        match (self, other) {
            (Datum::Number(a), Datum::Number(b)) => numbers_close(*a, *b),
            (Datum::Text(a), Datum::Text(b)) => a == b,
            _ => false,
        }
    }
}

pub fn numbers_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= NUMERIC_RTOL * a.abs().max(b.abs())
}

/// Rows projected through the SELECT clause, or one aggregate value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultSet {
    pub values: Vec<Datum>,
}

impl ResultSet {
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn text_key(s: &str) -> String {
    s.trim().to_lowercase()
}

/// How a cell of a given column projects into a result.
fn project(cell: &Cell, ty: ColumnType) -> Datum {
    match ty {
        ColumnType::Real => match cell.as_f64() {
            Some(v) => Datum::Number(v),
            None => Datum::Text(text_key(&cell.text())),
        },
        ColumnType::Text => Datum::Text(text_key(&cell.text())),
    }
}

fn resolve(col: ColumnRef, table: &Table) -> Result<usize, ExecError> {
    match col {
        ColumnRef::Index(i) if i < table.width() => Ok(i),
        ColumnRef::Index(i) => Err(ExecError::new(
            ExecErrorKind::UnknownColumn,
            format!("column {i} not in table {} of width {}", table.id, table.width()),
        )),
        ColumnRef::Unknown => Err(ExecError::new(ExecErrorKind::UnknownColumn, "query references <unk>")),
    }
}

fn condition_holds(cond: &Condition, col: usize, ty: ColumnType, cell: &Cell) -> Result<bool, ExecError> {
    match cond.op {
        Operator::Eq => {
            if ty == ColumnType::Real {
                if let (Some(a), Some(b)) = (cell.as_f64(), parse_number(&cond.value)) {
                    return Ok(numbers_close(a, b));
                }
            }
            Ok(text_key(&cell.text()) == text_key(&cond.value))
        }
        Operator::Gt | Operator::Lt => {
            let bound = parse_number(&cond.value).ok_or_else(|| {
                ExecError::new(ExecErrorKind::TypeMismatch, format!("`{}` is not numeric", cond.value))
            })?;
            let v = cell.as_f64().ok_or_else(|| {
                ExecError::new(
                    ExecErrorKind::TypeMismatch,
                    format!("cell `{cell}` of column {col} is not numeric"),
                )
            })?;
            Ok(if cond.op == Operator::Gt { v > bound } else { v < bound })
        }
    }
}

pub fn execute(query: &SqlQuery, table: &Table) -> Result<ResultSet, ExecError> {
    if query.conditions.len() > MAX_CONDITIONS {
        return Err(ExecError::new(
            ExecErrorKind::MalformedQuery,
            format!("{} conditions", query.conditions.len()),
        ));
    }
    let sel = resolve(query.select, table)?;
    let conds = query
        .conditions
        .iter()
        .map(|c| resolve(c.column, table).map(|i| (c, i)))
        .collect::<Result<Vec<_>, _>>()?;

    for (cond, _) in &conds {
        if cond.op != Operator::Eq && parse_number(&cond.value).is_none() {
            return Err(ExecError::new(ExecErrorKind::TypeMismatch, format!("`{}` is not numeric", cond.value)));
        }
    }

    // Every condition is checked on every row so type errors do not depend
    // on condition order.
    let mut selected = Vec::new();
    for row in &table.rows {
        let mut keep = true;
        for (cond, col) in &conds {
            keep &= condition_holds(cond, *col, table.types[*col], &row[*col])?;
        }
        if keep {
            selected.push(&row[sel]);
        }
    }

    let sel_type = table.types[sel];
    let numeric = |cells: &[&Cell]| -> Result<Vec<f64>, ExecError> {
        cells
            .iter()
            .map(|c| {
                c.as_f64().ok_or_else(|| {
                    ExecError::new(ExecErrorKind::TypeMismatch, format!("cannot aggregate `{c}`"))
                })
            })
            .collect()
    };
    let require_real = || {
        if sel_type == ColumnType::Real {
            Ok(())
        } else {
            Err(ExecError::new(
                ExecErrorKind::TypeMismatch,
                format!("{:?} over text column {sel}", query.agg),
            ))
        }
    };
    let values = match query.agg {
        Aggregation::None => selected.iter().map(|c| project(c, sel_type)).collect(),
        Aggregation::Count => vec![Datum::Number(selected.len() as f64)],
        Aggregation::Max | Aggregation::Min | Aggregation::Sum | Aggregation::Avg => {
            require_real()?;
            let xs = numeric(&selected)?;
            if xs.is_empty() {
                Vec::new()
            } else {
                let v = match query.agg {
                    Aggregation::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    Aggregation::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
                    Aggregation::Sum => xs.iter().sum(),
                    _ => xs.iter().sum::<f64>() / xs.len() as f64,
                };
                vec![Datum::Number(v)]
            }
        }
    };
    Ok(ResultSet { values })
}

/// Order-insensitive multiset equality with numeric tolerance.
pub fn results_equal(a: &ResultSet, b: &ResultSet) -> bool {
    if a.values.len() != b.values.len() {
        return false;
    }
    let mut xs: Vec<&Datum> = a.values.iter().collect();
    let mut ys: Vec<&Datum> = b.values.iter().collect();
    xs.sort_by(|p, q| p.total_cmp(q));
    ys.sort_by(|p, q| p.total_cmp(q));
    xs.iter().zip(&ys).all(|(x, y)| x.matches(y))
}
