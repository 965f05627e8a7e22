#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sead_core::data::{Cell, Table};
use sead_core::executor::{Datum, ResultSet};
use sead_core::model::train::inference_source;
use sead_core::model::{ModelConfig, Seq2Seq};
use sead_core::sql::{render_query, Aggregation, ColumnRef, ColumnType, Condition, Operator, Schema, SqlQuery, MAX_CONDITIONS};

pub fn word<R: Rng>(rng: &mut R) -> String {
    const SYL: &[&str] = &["ka", "lo", "mi", "ne", "ru", "ta", "zo", "bi", "qu", "fe", "sha", "dor"];
    (0..rng.random_range(1..=3)).map(|_| *SYL.choose(rng).unwrap()).collect()
}

pub fn random_schema<R: Rng>(rng: &mut R, max_cols: usize) -> Schema {
    let n = rng.random_range(1..=max_cols);
    let cols = (0..n).map(|_| {
        let name = (0..rng.random_range(1..=3)).map(|_| word(rng)).collect::<Vec<_>>().join(" ");
        let ty = if rng.random_bool(0.5) { ColumnType::Text } else { ColumnType::Real };
        (name, ty)
    });
    Schema::new("t", cols.collect::<Vec<_>>()).unwrap()
}

/// A condition value already in its tokenized form.
pub fn random_value<R: Rng>(rng: &mut R) -> String {
    const PUNCT: &[&str] = &["-", "(", ")", "'", "&", "/", ".", ","];
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| match rng.random_range(0..6) {
            0 => rng.random_range(0..1000).to_string(),
            1 => format!("{}.{}", rng.random_range(0..100), rng.random_range(1..10)),
            2 => PUNCT.choose(rng).unwrap().to_string(),
            _ => word(rng),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn random_column<R: Rng>(rng: &mut R, width: usize, unk_rate: f64) -> ColumnRef {
    if rng.random_bool(unk_rate) {
        ColumnRef::Unknown
    } else {
        ColumnRef::Index(rng.random_range(0..width))
    }
}

pub fn random_query<R: Rng>(rng: &mut R, schema: &Schema, unk_rate: f64) -> SqlQuery {
    let agg = Aggregation::ALL[rng.random_range(0..Aggregation::ALL.len())];
    let n = rng.random_range(0..=MAX_CONDITIONS);
    let conditions = (0..n)
        .map(|_| Condition {
            column: random_column(rng, schema.len(), unk_rate),
            op: [Operator::Eq, Operator::Gt, Operator::Lt][rng.random_range(0..3)],
            value: random_value(rng),
        })
        .collect();
    SqlQuery { select: random_column(rng, schema.len(), unk_rate), agg, conditions }
}

/// Table with repeated, case-varied text and occasionally dirty numeric cells.
pub fn random_table<R: Rng>(rng: &mut R, max_rows: usize) -> Table {
    let width = rng.random_range(1..=6);
    let types: Vec<ColumnType> =
        (0..width).map(|_| if rng.random_bool(0.5) { ColumnType::Text } else { ColumnType::Real }).collect();
    let pool: Vec<String> = (0..4).map(|_| word(rng)).collect();
    let rows = (0..rng.random_range(0..=max_rows))
        .map(|_| {
            types
                .iter()
                .map(|ty| match ty {
                    ColumnType::Real if rng.random_bool(0.05) => Cell::Text("n/a".into()),
                    ColumnType::Real if rng.random_bool(0.2) => {
                        Cell::Text(format!(" {}.5", rng.random_range(0..10)))
                    }
                    ColumnType::Real => Cell::Number(rng.random_range(0..10).into()),
                    ColumnType::Text => {
                        let w = pool.choose(rng).unwrap().clone();
                        Cell::Text(match rng.random_range(0..3) {
                            0 => w.to_uppercase(),
                            1 => format!(" {w} "),
                            _ => w,
                        })
                    }
                })
                .collect()
        })
        .collect();
    let header = (0..width).map(|i| format!("c{i}")).collect();
    Table::new("t", header, types, rows).unwrap()
}

/// Query whose literals mostly come from the table so filters select rows.
pub fn random_exec_query<R: Rng>(rng: &mut R, table: &Table) -> SqlQuery {
    let width = table.width();
    let literal = |rng: &mut R, col: usize| -> String {
        if !table.rows.is_empty() && rng.random_bool(0.8) {
            table.rows[rng.random_range(0..table.rows.len())][col].text()
        } else if rng.random_bool(0.5) {
            rng.random_range(0..10).to_string()
        } else {
            word(rng)
        }
    };
    let overflow = usize::from(rng.random_bool(0.03));
    let select = if rng.random_bool(0.03) {
        ColumnRef::Unknown
    } else {
        ColumnRef::Index(rng.random_range(0..width + overflow))
    };
    let conditions = (0..rng.random_range(0..=3))
        .map(|_| {
            let col = rng.random_range(0..width);
            Condition { column: ColumnRef::Index(col), op: [Operator::Eq, Operator::Gt, Operator::Lt][rng.random_range(0..3)], value: literal(rng, col) }
        })
        .collect();
    SqlQuery { select, agg: Aggregation::ALL[rng.random_range(0..6)], conditions }
}

/// Analytic gradients agree with central differences on a sample of parameters.
pub fn gradient_check(seed: u64, wanted: usize) -> (usize, f64) {
    let (tables, corpus) = sead_core::data::gen_synthetic(seed, 3, 4);
    let vocab = sead_core::vocab::Vocabulary::build(&corpus, &tables, 1).unwrap();
    let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ff: 16, dropout: 0.0, init_seed: seed, ..Default::default() };
    let mut m = Seq2Seq::new(cfg, vocab).unwrap();
    let recs = corpus.records;
    let ex = m.prepare(&inference_source(&recs[0], &tables).unwrap(), &render_query(&recs[0].gold)).unwrap();
    let mut grads = m.params.zeros_like();
    m.loss_and_grads(&ex, 1.0, &mut grads, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while checked < wanted && attempts < 100 * wanted {
        attempts += 1;
        let p = rng.random_range(0..m.params.len());
        let k = rng.random_range(0..m.params.values[p].data.len());
        let analytic = grads[p].data[k];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let h = 1e-6;
        let orig = m.params.values[p].data[k];
        m.params.values[p].data[k] = orig + h;
        let up = m.loss(&ex, 1.0);
        m.params.values[p].data[k] = orig - h;
        let down = m.loss(&ex, 1.0);
        m.params.values[p].data[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    (checked, worst)
}

/// Independent full-scan reference executor.
pub mod oracle {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub enum Val {
        Num(f64),
        Txt(String),
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Fail {
        UnknownColumn,
        TypeMismatch,
    }

    fn num(s: &str) -> Option<f64> {
        let s = s.trim().replace(',', "");
        if s.is_empty() {
            return None;
        }
        s.parse::<f64>().ok().filter(|x| x.is_finite())
    }

    fn close(a: f64, b: f64) -> bool {
        a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
    }

    fn cell_text(c: &Cell) -> String {
        match c {
            Cell::Number(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn col(r: ColumnRef, t: &Table) -> Result<usize, Fail> {
        match r {
            ColumnRef::Index(i) if i < t.header.len() => Ok(i),
            _ => Err(Fail::UnknownColumn),
        }
    }

    pub fn run(q: &SqlQuery, t: &Table) -> Result<Vec<Val>, Fail> {
        let sel = col(q.select, t)?;
        let mut conds = Vec::new();
        for c in &q.conditions {
            conds.push((col(c.column, t)?, c));
        }
        for (ci, c) in &conds {
            if c.op != Operator::Eq {
                if num(&c.value).is_none() {
                    return Err(Fail::TypeMismatch);
                }
                if t.rows.iter().any(|r| num(&cell_text(&r[*ci])).is_none()) {
                    return Err(Fail::TypeMismatch);
                }
            }
        }
        let mut picked: Vec<&Cell> = Vec::new();
        'rows: for r in &t.rows {
            for (ci, c) in &conds {
                let cell = cell_text(&r[*ci]);
                let ok = match c.op {
                    Operator::Eq => {
                        let numeric = t.types[*ci] == ColumnType::Real;
                        match (numeric, num(&cell), num(&c.value)) {
                            (true, Some(a), Some(b)) => close(a, b),
                            _ => cell.trim().to_lowercase() == c.value.trim().to_lowercase(),
                        }
                    }
                    Operator::Gt => num(&cell).unwrap() > num(&c.value).unwrap(),
                    Operator::Lt => num(&cell).unwrap() < num(&c.value).unwrap(),
                };
                if !ok {
                    continue 'rows;
                }
            }
            picked.push(&r[sel]);
        }
        let real = t.types[sel] == ColumnType::Real;
        if q.agg == Aggregation::None {
            return Ok(picked
                .iter()
                .map(|c| match (real, num(&cell_text(c))) {
                    (true, Some(x)) => Val::Num(x),
                    _ => Val::Txt(cell_text(c).trim().to_lowercase()),
                })
                .collect());
        }
        if q.agg == Aggregation::Count {
            return Ok(vec![Val::Num(picked.len() as f64)]);
        }
        if !real {
            return Err(Fail::TypeMismatch);
        }
        let mut xs = Vec::new();
        for c in &picked {
            xs.push(num(&cell_text(c)).ok_or(Fail::TypeMismatch)?);
        }
        if xs.is_empty() {
            return Ok(vec![]);
        }
        let v = match q.agg {
            Aggregation::Max => xs.iter().cloned().fold(f64::MIN, f64::max),
            Aggregation::Min => xs.iter().cloned().fold(f64::MAX, f64::min),
            Aggregation::Sum => xs.iter().sum(),
            _ => xs.iter().sum::<f64>() / xs.len() as f64,
        };
        Ok(vec![Val::Num(v)])
    }

    fn key(v: &Val) -> (u8, f64, String) {
        match v {
            Val::Num(x) => (0, *x, String::new()),
            Val::Txt(s) => (1, 0.0, s.clone()),
        }
    }

    /// Multiset comparison of oracle output with an executor result.
    pub fn agrees(expected: &[Val], got: &ResultSet) -> bool {
        let mut a: Vec<Val> = expected.to_vec();
        let mut b: Vec<Val> = got
            .values
            .iter()
            .map(|d| match d {
                Datum::Number(x) => Val::Num(*x),
                Datum::Text(s) => Val::Txt(s.clone()),
            })
            .collect();
        if a.len() != b.len() {
            return false;
        }
        let order = |x: &Val, y: &Val| {
            let (kx, ky) = (key(x), key(y));
            kx.0.cmp(&ky.0).then(kx.1.total_cmp(&ky.1)).then(kx.2.cmp(&ky.2))
        };
        a.sort_by(order);
        b.sort_by(order);
        a.iter().zip(&b).all(|(x, y)| match (x, y) {
            (Val::Num(p), Val::Num(q)) => close(*p, *q),
            (Val::Txt(p), Val::Txt(q)) => p == q,
            _ => false,
        })
    }
}
