//! Tables, example records and corpora in the WikiSQL line-delimited layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::executor;
use crate::sql::{
    tokenize, Aggregation, Column, ColumnRef, ColumnType, Condition, Operator, Schema, SqlQuery,
    MAX_CONDITIONS,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format error on line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("table `{0}` is not loaded")]
    MissingTable(String),
    #[error("need at least two tables to sample a foreign column")]
    InsufficientTables,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// A table cell. Numbers keep their JSON literal so files round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Number(serde_json::Number),
    Text(String),
}

impl Cell {
    pub fn text(&self) -> String {
        match self {
            Cell::Number(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Number(n) => n.as_f64(),
            Cell::Text(s) => parse_number(s),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Lenient numeric parse used for cells and literals (`1,200` reads as 1200).
pub fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    let cleaned: String = t.chars().filter(|&c| c != ',').collect();
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub header: Vec<String>,
    pub types: Vec<ColumnType>,
    pub rows: Vec<Vec<Cell>>,
    /// Set when a `real` column holds a cell that does not parse as a number.
    #[serde(skip)]
    pub dirty: bool,
}

#[derive(Deserialize, Serialize)]
struct TableLine {
    id: String,
    header: Vec<String>,
    types: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(
        id: impl Into<String>,
        header: Vec<String>,
        types: Vec<ColumnType>,
        rows: Vec<Vec<Cell>>,
    ) -> Result<Self, String> {
        if header.len() != types.len() {
            return Err(format!("{} header names but {} types", header.len(), types.len()));
        }
        if header.is_empty() {
            return Err("table has no columns".into());
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != header.len()) {
            return Err(format!("row {i} has width {} (expected {})", r.len(), header.len()));
        }
        let mut table = Table { id: id.into(), header, types, rows, dirty: false };
        table.dirty = table.rows.iter().any(|row| {
            row.iter()
                .zip(&table.types)
                .any(|(cell, ty)| *ty == ColumnType::Real && cell.as_f64().is_none())
        });
        Ok(table)
    }

    pub fn width(&self) -> usize {
        self.header.len()
    }

    pub fn schema(&self) -> Schema {
        schema_of(self)
    }

    fn to_line(&self) -> TableLine {
        TableLine {
            id: self.id.clone(),
            header: self.header.clone(),
            types: self.types.iter().map(|t| t.as_str().to_string()).collect(),
            rows: self.rows.clone(),
        }
    }
}

/// Schema whose columns mirror the table header and types in order.
pub fn schema_of(table: &Table) -> Schema {
    let cols = table.header.iter().cloned().zip(table.types.iter().copied());
    // Headers are validated non-empty at load; a blank header falls back to a placeholder.
    Schema::new(table.id.clone(), cols).unwrap_or_else(|_| {
        let cols = table.header.iter().enumerate().map(|(i, h)| {
            let name = if tokenize(h).is_empty() { format!("column {i}") } else { h.clone() };
            (name, table.types[i])
        });
        Schema::new(table.id.clone(), cols).expect("placeholder names are non-empty")
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub question: String,
    pub table_id: String,
    pub gold: SqlQuery,
    /// Which condition values were JSON numbers in the source file.
    numeric_values: Vec<bool>,
}

impl ExampleRecord {
    pub fn new(question: impl Into<String>, table_id: impl Into<String>, gold: SqlQuery) -> Self {
        let numeric_values = vec![false; gold.conditions.len()];
        ExampleRecord { question: question.into(), table_id: table_id.into(), gold, numeric_values }
    }

    /// Question tokens in formulation form.
    pub fn question_tokens(&self) -> Vec<String> {
        tokenize(&self.question)
    }

    pub fn to_json(&self) -> Value {
        let conds: Vec<Value> = self
            .gold
            .conditions
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let col = c.column.index().map_or(Value::Null, Value::from);
                let value = if self.numeric_values.get(i).copied().unwrap_or(false) {
                    serde_json::from_str::<serde_json::Number>(&c.value)
                        .map(Value::Number)
                        .unwrap_or_else(|_| Value::String(c.value.clone()))
                } else {
                    Value::String(c.value.clone())
                };
                Value::Array(vec![col, Value::from(c.op.index()), value])
            })
            .collect();
        serde_json::json!({
            "question": self.question,
            "table_id": self.table_id,
            "sql": {
                "sel": self.gold.select.index(),
                "agg": self.gold.agg.index(),
                "conds": conds,
            }
        })
    }

    fn from_json(v: &Value) -> Result<Self, String> {
        let question = v["question"].as_str().ok_or("missing string field `question`")?;
        let table_id = v["table_id"].as_str().ok_or("missing string field `table_id`")?;
        let sql = v.get("sql").ok_or("missing field `sql`")?;
        let sel = sql["sel"].as_u64().ok_or("`sql.sel` must be a non-negative integer")? as usize;
        let agg_idx = sql["agg"].as_u64().ok_or("`sql.agg` must be a non-negative integer")?;
        let agg = Aggregation::from_index(agg_idx as usize)
            .ok_or_else(|| format!("aggregation index {agg_idx} out of range 0..=5"))?;
        let conds = sql["conds"].as_array().ok_or("`sql.conds` must be an array")?;
        if conds.len() > MAX_CONDITIONS {
            return Err(format!("{} conditions exceed the limit of {MAX_CONDITIONS}", conds.len()));
        }
        let mut conditions = Vec::with_capacity(conds.len());
        let mut numeric_values = Vec::with_capacity(conds.len());
        for c in conds {
            let parts = c.as_array().filter(|a| a.len() == 3).ok_or("condition must be [col, op, value]")?;
            let col = parts[0].as_u64().ok_or("condition column must be an integer")? as usize;
            let op_idx = parts[1].as_u64().ok_or("condition operator must be an integer")?;
            let op = Operator::from_index(op_idx as usize)
                .ok_or_else(|| format!("operator index {op_idx} out of range 0..=2"))?;
            let (value, numeric) = match &parts[2] {
                Value::String(s) => (s.clone(), false),
                Value::Number(n) => (n.to_string(), true),
                other => return Err(format!("condition value must be a string or number, got {other}")),
            };
            conditions.push(Condition { column: ColumnRef::Index(col), op, value });
            numeric_values.push(numeric);
        }
        Ok(ExampleRecord {
            question: question.to_string(),
            table_id: table_id.to_string(),
            gold: SqlQuery { select: ColumnRef::Index(sel), agg, conditions },
            numeric_values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub records: Vec<ExampleRecord>,
}

impl CorpusSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// All loaded tables, keyed by id in sorted order.
#[derive(Debug, Clone, Default)]
pub struct TableStore {
    tables: BTreeMap<String, Table>,
    /// (table id, column ordinal) for every column, in store order.
    column_index: Vec<(String, usize)>,
}

impl TableStore {
    pub fn new(tables: impl IntoIterator<Item = Table>) -> Self {
        let tables: BTreeMap<String, Table> = tables.into_iter().map(|t| (t.id.clone(), t)).collect();
        let column_index = tables
            .values()
            .flat_map(|t| (0..t.width()).map(move |i| (t.id.clone(), i)))
            .collect();
        TableStore { tables, column_index }
    }

    pub fn get(&self, id: &str) -> Result<&Table, DataError> {
        self.tables.get(id).ok_or_else(|| DataError::MissingTable(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    /// A column drawn uniformly from all columns of tables other than `exclude_table`.
    pub fn sample_foreign_column<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        exclude_table: &str,
    ) -> Result<Column, DataError> {
        let others = self.tables.keys().filter(|k| k.as_str() != exclude_table).count();
        if others == 0 || self.tables.len() < 2 {
            return Err(DataError::InsufficientTables);
        }
        let excluded = self.tables.get(exclude_table).map_or(0, Table::width);
        let pool = self.column_index.len() - excluded;
        let mut pick = rng.random_range(0..pool);
        for (tid, col) in &self.column_index {
            if tid == exclude_table {
                continue;
            }
            if pick == 0 {
                let t = &self.tables[tid];
                return Ok(Column { index: *col, name: t.header[*col].clone(), col_type: t.types[*col] });
            }
            pick -= 1;
        }
        unreachable!("pick is bounded by the pool size")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for t in self.tables.values() {
            let line = serde_json::to_string(&t.to_line()).expect("tables serialize");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// What to do with a malformed line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnError {
    Skip,
    Abort,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub lines: usize,
    pub records: usize,
    pub skipped: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Reads a tables file: one JSON object per line with `id`, `header`, `types`, `rows`.
pub fn load_tables(path: &Path, on_error: OnError) -> Result<(TableStore, IngestReport), DataError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut tables = Vec::new();
    let mut report = IngestReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let parsed = serde_json::from_str::<TableLine>(&line)
            .map_err(|e| e.to_string())
            .and_then(|t| {
                let types = t
                    .types
                    .iter()
                    .map(|s| ColumnType::parse(s).ok_or_else(|| format!("unknown column type `{s}`")))
                    .collect::<Result<Vec<_>, _>>()?;
                Table::new(t.id, t.header, types, t.rows)
            });
        match parsed {
            Ok(t) => {
                if t.dirty {
                    report.warnings.push(format!("table {} has non-numeric cells in real columns", t.id));
                }
                tables.push(t);
                report.records += 1;
            }
            Err(reason) => match on_error {
                OnError::Abort => return Err(DataError::Format { line: line_no, reason }),
                OnError::Skip => {
                    warn!(line = line_no, %reason, "skipping malformed table line");
                    report.skipped.push(line_no);
                }
            },
        }
    }
    Ok((TableStore::new(tables), report))
}

/// Reads an examples file against already loaded tables.
pub fn ingest_examples(
    path: &Path,
    tables: &TableStore,
    name: SplitName,
    on_error: OnError,
) -> Result<(CorpusSplit, IngestReport), DataError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let parsed = serde_json::from_str::<Value>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| ExampleRecord::from_json(&v));
        let record = match parsed {
            Ok(r) => r,
            Err(reason) => match on_error {
                OnError::Abort => return Err(DataError::Format { line: line_no, reason }),
                OnError::Skip => {
                    warn!(line = line_no, %reason, "skipping malformed example line");
                    report.skipped.push(line_no);
                    continue;
                }
            },
        };
        let table = match tables.get(&record.table_id) {
            Ok(t) => t,
            Err(e) => match on_error {
                OnError::Abort => return Err(e),
                OnError::Skip => {
                    report.skipped.push(line_no);
                    report.warnings.push(format!("line {line_no}: {e}"));
                    continue;
                }
            },
        };
        let width = table.width();
        if let Some(bad) = record.gold.column_refs().filter_map(ColumnRef::index).find(|&c| c >= width) {
            let reason = format!("column {bad} out of range for table {} ({width} columns)", table.id);
            match on_error {
                OnError::Abort => return Err(DataError::Format { line: line_no, reason }),
                OnError::Skip => {
                    report.skipped.push(line_no);
                    report.warnings.push(reason);
                    continue;
                }
            }
        }
        check_values_reachable(&record, table, &mut report);
        records.push(record);
    }
    report.records = records.len();
    if records.is_empty() {
        warn!(path = %path.display(), "no records ingested");
        report.warnings.push("split is empty".into());
    }
    Ok((CorpusSplit { name, records }, report))
}

/// Condition values should be copyable from the question; log the ones that are not.
fn check_values_reachable(record: &ExampleRecord, table: &Table, report: &mut IngestReport) {
    let mut source: Vec<String> = record.question_tokens();
    for h in &table.header {
        source.extend(tokenize(&h.to_lowercase()));
    }
    for c in &record.gold.conditions {
        let missing: Vec<String> = crate::sql::value_tokens(&c.value)
            .into_iter()
            .filter(|t| !source.contains(t))
            .collect();
        if !missing.is_empty() {
            let msg = format!("value `{}` of table {} not found in question", c.value, table.id);
            tracing::debug!("{msg}");
            report.warnings.push(msg);
        }
    }
}

pub fn write_examples(path: &Path, records: &[ExampleRecord]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        writeln!(w, "{}", r.to_json()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

const TEXT_COLUMNS: &[&str] = &[
    "name", "city", "country", "team", "position", "school", "player", "party", "district",
    "venue", "opponent", "result", "director", "title", "network", "nationality", "club",
    "state", "home team", "away team", "college", "writer", "surface", "location", "artist",
    "song", "label", "format", "driver", "constructor",
];

const REAL_COLUMNS: &[&str] = &[
    "year", "points", "rank", "score", "goals", "wins", "losses", "age", "attendance",
    "round", "pick", "games", "laps", "grid", "seats", "votes", "first elected", "total",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "to", "sa", "vel", "dor", "ni", "pra", "es", "tun", "bo", "lin",
    "qua", "zer", "ho", "mar", "te", "gul",
];

fn random_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn random_text_value<R: Rng + ?Sized>(rng: &mut R) -> String {
    if rng.random_bool(0.25) {
        format!("{} {}", random_word(rng), random_word(rng))
    } else {
        random_word(rng)
    }
}

fn random_table<R: Rng + ?Sized>(rng: &mut R, id: String) -> Table {
    let width = rng.random_range(3..=6);
    let mut names: Vec<(&str, ColumnType)> = Vec::with_capacity(width);
    while names.len() < width {
        let (pool, ty) = if rng.random_bool(0.55) {
            (TEXT_COLUMNS, ColumnType::Text)
        } else {
            (REAL_COLUMNS, ColumnType::Real)
        };
        let name = *pool.choose(rng).expect("non-empty");
        if !names.iter().any(|(n, _)| *n == name) {
            names.push((name, ty));
        }
    }
    let n_rows = rng.random_range(5..=15);
    let rows = (0..n_rows)
        .map(|_| {
            names
                .iter()
                .map(|(_, ty)| match ty {
                    ColumnType::Text => Cell::Text(random_text_value(rng)),
                    ColumnType::Real => Cell::Number(serde_json::Number::from(rng.random_range(1..=99u32))),
                })
                .collect()
        })
        .collect();
    let header = names.iter().map(|(n, _)| n.to_string()).collect();
    let types = names.iter().map(|(_, t)| *t).collect();
    Table::new(id, header, types, rows).expect("generated tables are well-formed")
}

fn agg_phrase<R: Rng + ?Sized>(agg: Aggregation, rng: &mut R) -> &'static str {
    let options: &[&str] = match agg {
        Aggregation::None => &["what is the", "which", "name the", "tell me the"],
        Aggregation::Max => &["what is the highest", "what is the largest"],
        Aggregation::Min => &["what is the lowest", "what is the smallest"],
        Aggregation::Count => &["how many", "what is the number of"],
        Aggregation::Sum => &["what is the total", "what is the sum of"],
        Aggregation::Avg => &["what is the average", "what is the mean"],
    };
    options.choose(rng).expect("non-empty")
}

fn op_phrase<R: Rng + ?Sized>(op: Operator, rng: &mut R) -> &'static str {
    let options: &[&str] = match op {
        Operator::Eq => &["is", "of", "equal to"],
        Operator::Gt => &["greater than", "more than", "larger than"],
        Operator::Lt => &["less than", "smaller than", "fewer than"],
    };
    options.choose(rng).expect("non-empty")
}

fn sample_query<R: Rng + ?Sized>(table: &Table, rng: &mut R) -> SqlQuery {
    let width = table.width();
    let anchor = &table.rows[rng.random_range(0..table.rows.len())];
    let select = rng.random_range(0..width);
    let agg = match table.types[select] {
        ColumnType::Text => {
            if rng.random_bool(0.2) {
                Aggregation::Count
            } else {
                Aggregation::None
            }
        }
        ColumnType::Real => *[
            Aggregation::None,
            Aggregation::None,
            Aggregation::Max,
            Aggregation::Min,
            Aggregation::Count,
            Aggregation::Sum,
            Aggregation::Avg,
        ]
        .choose(rng)
        .expect("non-empty"),
    };
    let mut candidates: Vec<usize> = (0..width).filter(|&c| c != select).collect();
    let n_conds = rng.random_range(1..=3.min(candidates.len()));
    let mut conditions = Vec::with_capacity(n_conds);
    for _ in 0..n_conds {
        let pos = rng.random_range(0..candidates.len());
        let col = candidates.swap_remove(pos);
        let cell = &anchor[col];
        let cond = match table.types[col] {
            ColumnType::Text => Condition::new(col, Operator::Eq, cell.text()),
            ColumnType::Real => {
                let v = cell.as_f64().expect("generated real cells are numeric") as i64;
                match rng.random_range(0..3) {
                    1 if v > 1 => Condition::new(col, Operator::Gt, (v - rng.random_range(1..v.min(10))).to_string()),
                    2 => Condition::new(col, Operator::Lt, (v + rng.random_range(1..10)).to_string()),
                    _ => Condition::new(col, Operator::Eq, v.to_string()),
                }
            }
        };
        conditions.push(cond);
    }
    SqlQuery::new(select, agg, conditions)
}

fn realize_question<R: Rng + ?Sized>(query: &SqlQuery, table: &Table, rng: &mut R) -> String {
    let sel = &table.header[query.select.index().expect("generated queries are resolved")];
    let head = format!("{} {}", agg_phrase(query.agg, rng), sel);
    let clauses: Vec<String> = query
        .conditions
        .iter()
        .map(|c| {
            let name = &table.header[c.column.index().expect("resolved")];
            format!("{name} {} {}", op_phrase(c.op, rng), c.value)
        })
        .collect();
    let body = clauses.join(" and ");
    if rng.random_bool(0.5) {
        format!("{head} when {body} ?")
    } else {
        let lead = ["when", "if", "with"].choose(rng).expect("non-empty");
        format!("{lead} {body} , {head} ?")
    }
}

/// Random small tables with templated questions whose gold queries all return rows.
///
/// Condition mention order in the question is random and the gold lists
/// conditions in mention order.
pub fn gen_synthetic(seed: u64, n_tables: usize, n_examples: usize) -> (TableStore, CorpusSplit) {
    assert!(n_tables >= 1 && n_examples >= 1, "need at least one table and one example");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<Table> = (0..n_tables)
        .map(|i| random_table(&mut rng, format!("synth-{seed}-{i}")))
        .collect();
    let mut records = Vec::with_capacity(n_examples);
    while records.len() < n_examples {
        let table = &tables[rng.random_range(0..tables.len())];
        let query = sample_query(table, &mut rng);
        let non_empty = executor::execute(&query, table).map(|r| !r.is_empty()).unwrap_or(false);
        if !non_empty {
            continue;
        }
        let question = realize_question(&query, table, &mut rng);
        records.push(ExampleRecord::new(question, table.id.clone(), query));
    }
    (TableStore::new(tables), CorpusSplit { name: SplitName::Train, records })
}

/// Splits a generated corpus; tables stay shared.
pub fn split_records(corpus: CorpusSplit, n_first: usize) -> (CorpusSplit, CorpusSplit) {
    let mut first = corpus.records;
    let second = first.split_off(n_first.min(first.len()));
    (
        CorpusSplit { name: SplitName::Train, records: first },
        CorpusSplit { name: SplitName::Dev, records: second },
    )
}

/// Seed for an independent stream derived from a master seed and coordinates.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(master: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, a, b))
}
